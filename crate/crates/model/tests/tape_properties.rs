use ndarray::Array2;
use proptest::prelude::*;

use lcpred_model::tape::softmax_rows;
use lcpred_model::{Graph, Var};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

/// Loss of a small graph touching matmul, row bias, layer norm, gelu,
/// attention and cross-entropy; returns the loss and the `x`, `w` leaves.
fn composite(g: &mut Graph<f64>, x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>, labels: &[usize]) -> (Var, Var, Var) {
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let bv = g.leaf(b.clone());
    let gain = g.leaf(Array2::from_elem((1, 4), 1.0));
    let shift = g.leaf(Array2::zeros((1, 4)));
    let h = g.matmul(xv, wv);
    let h = g.add_row(h, bv);
    let h = g.layer_norm(h, gain, shift);
    let h = g.gelu(h);
    let a = g.attention(h, h, h, 3, 2);
    let pooled = g.mean_pool(a, 3);
    (g.cross_entropy(pooled, labels), xv, wv)
}

fn loss_value(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let (loss, _, _) = composite(&mut g, x, w, b, labels);
    g.value(loss)[[0, 0]]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(m in matrix(4, 5), shift in -50.0f64..50.0) {
        let mut a = m.clone();
        softmax_rows(&mut a);
        let mut b = m.mapv(|v| v + shift);
        softmax_rows(&mut b);
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            prop_assert!((ra.sum() - 1.0).abs() < 1e-12);
            prop_assert!(ra.iter().all(|p| *p > 0.0));
            for (p, q) in ra.iter().zip(rb.iter()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_gradients_match_central_differences(
        x in matrix(6, 3),
        w in matrix(3, 4),
        b in matrix(1, 4),
        labels in prop::collection::vec(0usize..4, 2),
    ) {
        let mut g = Graph::new();
        let (loss, xv, wv) = composite(&mut g, &x, &w, &b, &labels);
        let grads = g.backward(loss);
        let (xi, wi) = (xv.index(), wv.index());
        let h = 1e-6;
        for (idx, value, grad) in [(xi, &x, &grads[xi]), (wi, &w, &grads[wi])] {
            let grad = grad.as_ref().unwrap();
            for r in 0..value.nrows() {
                for c in 0..value.ncols() {
                    let (mut plus, mut minus) = (value.clone(), value.clone());
                    plus[[r, c]] += h;
                    minus[[r, c]] -= h;
                    let (lp, lm) = if idx == xi {
                        (loss_value(&plus, &w, &b, &labels), loss_value(&minus, &w, &b, &labels))
                    } else {
                        (loss_value(&x, &plus, &b, &labels), loss_value(&x, &minus, &b, &labels))
                    };
                    let numeric = (lp - lm) / (2.0 * h);
                    let err = (numeric - grad[[r, c]]).abs() / numeric.abs().max(grad[[r, c]].abs()).max(1e-4);
                    prop_assert!(err < 1e-4, "d/d[{r},{c}]: numeric {numeric} analytic {}", grad[[r, c]]);
                }
            }
        }
    }
}

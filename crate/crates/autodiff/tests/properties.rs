use proptest::prelude::*;
use sg_autodiff::{Graph, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::from_vec(&shape, d))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Conv input, weight and an output-sized cotangent on exactly tiled sizes.
fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..4, prop::sample::select(vec![(3usize, 1usize, 1usize), (4, 2, 1), (1, 1, 0), (4, 1, 1)]), 4usize..9)
        .prop_filter("stride must tile the padded input", |(_, _, _, (k, s, p), hw)| (hw + 2 * p - k) % s == 0)
        .prop_flat_map(|(n, cin, cout, (k, s, p), hw)| {
            let out = (hw + 2 * p - k) / s + 1;
            (
                tensor(vec![n, cin, hw, hw]),
                tensor(vec![cout, cin, k, k]),
                tensor(vec![n, cout, out, out]),
                Just(s),
                Just(p),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(x in tensor(vec![2, 4, 3, 3]), shift in -30.0f64..30.0) {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let s = g.softmax_channels(a);
        let b = g.constant(x.map(|v| v + shift));
        let t = g.softmax_channels(b);
        let (sv, tv) = (g.value(s), g.value(t));
        for n in 0..2 {
            for p in 0..9 {
                let sum: f64 = (0..4).map(|c| sv.data()[(n * 4 + c) * 9 + p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        for (u, v) in sv.data().iter().zip(tv.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    /// `<conv(x), y> = <x, conv_T(y)>` with the same weights.
    #[test]
    fn transposed_convolution_is_the_adjoint((x, w, y, s, p) in conv_case()) {
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(y.clone()));
        let cx = g.conv2d(xv, wv, None, s, p);
        prop_assert_eq!(g.value(cx).shape(), y.shape());
        // conv_T takes [in, out, k, k]; the conv weight [out, in, k, k] read
        // that way maps cout channels back to cin.
        let ty = g.conv_transpose2d(yv, wv, None, s, p);
        let lhs = dot(g.value(cx), &y);
        prop_assert_eq!(g.value(ty).shape(), x.shape());
        let rhs = dot(&x, g.value(ty));
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn pooling_preserves_the_mean(x in tensor(vec![1, 2, 8, 8]), scale in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let p = g.pool_upsample(a, scale);
        prop_assert!((g.value(p).mean() - x.mean()).abs() < 1e-12);
        let again = g.pool_upsample(p, scale);
        for (u, v) in g.value(again).data().iter().zip(g.value(p).data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn total_variation_is_shift_invariant(x in tensor(vec![1, 2, 5, 4]), shift in -5.0f64..5.0) {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| v + shift));
        let (ta, tb) = (g.total_variation(a), g.total_variation(b));
        prop_assert!((g.value(ta).item() - g.value(tb).item()).abs() < 1e-12);
    }
}

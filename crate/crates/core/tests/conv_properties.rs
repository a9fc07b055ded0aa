//! Randomized convolution geometries: the fast paths against the direct
//! seven-loop reference, and the backward pass against the adjoint identities
//! of the (bilinear) reference forward.

use ekgnet::conv::{conv3d_backward, conv3d_forward, conv3d_naive, ConvSpec};
use ekgnet::rng::SeededRng;
use ekgnet::tensor::Tensor;
use ekgnet::verify::uniform_tensor;
use proptest::prelude::*;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
struct Case {
    spec: ConvSpec,
    batch: usize,
    extents: [usize; 3],
    seed: u64,
}

fn cases() -> impl Strategy<Value = Case> {
    (
        prop::sample::select(vec![1usize, 2, 3]),
        1usize..=2,
        1usize..=2,
        prop::sample::select(vec![1usize, 2, 3]),
        1usize..=2,
        0usize..=2,
        1usize..=2,
        1usize..=2,
        (3usize..=7, 3usize..=7, 3usize..=7),
        any::<u64>(),
    )
        .prop_filter_map(
            "kernel must fit the padded input",
            |(g, ci, co, s, st, p, d, b, (e0, e1, e2), seed)| {
                let spec = ConvSpec::new(g * ci, g * co, s)
                    .groups(g)
                    .stride(st)
                    .padding(p)
                    .dilation(d);
                let extents = [e0, e1, e2];
                spec.output_extents(extents).ok()?;
                Some(Case {
                    spec,
                    batch: b,
                    extents,
                    seed,
                })
            },
        )
}

fn inputs(c: &Case) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = SeededRng::new(c.seed);
    let [d, h, w] = c.extents;
    let x = uniform_tensor(&[c.batch, c.spec.in_channels, d, h, w], -1.0, 1.0, &mut rng);
    let wt = uniform_tensor(&c.spec.weight_shape(), -1.0, 1.0, &mut rng);
    let b = uniform_tensor(&[c.spec.out_channels], -1.0, 1.0, &mut rng);
    (x, wt, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn forward_matches_reference(c in cases()) {
        let (x, w, b) = inputs(&c);
        let fast = conv3d_forward(&x, &w, Some(&b), &c.spec).unwrap();
        let slow = conv3d_naive(&x, &w, Some(&b), &c.spec).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);

        let (x32, w32, b32) = (x.cast::<f32>(), w.cast::<f32>(), b.cast::<f32>());
        let fast = conv3d_forward(&x32, &w32, Some(&b32), &c.spec).unwrap();
        let slow = conv3d_naive(&x32, &w32, Some(&b32), &c.spec).unwrap();
        prop_assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-5);
    }

    #[test]
    fn backward_is_the_adjoint_of_the_reference(c in cases()) {
        let (x, w, b) = inputs(&c);
        let y = conv3d_naive(&x, &w, None, &c.spec).unwrap();
        let mut rng = SeededRng::new(c.seed ^ 1);
        let g: Tensor<f64> = uniform_tensor(y.shape(), -1.0, 1.0, &mut rng);
        let grads = conv3d_backward(&g, &x, &w, &c.spec).unwrap();
        // <conv(x, w), g> = <x, ∂x> = <w, ∂w>, and ∂b sums g per channel.
        let lhs = dot(&y, &g);
        let scale = 1.0 + lhs.abs();
        prop_assert!((lhs - dot(&x, &grads.grad_x)).abs() <= 1e-10 * scale);
        prop_assert!((lhs - dot(&w, &grads.grad_w)).abs() <= 1e-10 * scale);
        let yb = conv3d_naive(&x, &w, Some(&b), &c.spec).unwrap();
        let lhs_b = dot(&yb, &g) - lhs;
        prop_assert!((lhs_b - dot(&b, &grads.grad_b)).abs() <= 1e-10 * scale);
    }
}

#[test]
fn strided_output_extents() {
    // floor((n + 2p − d(s−1) − 1)/stride) + 1
    let spec = ConvSpec::new(1, 1, 3).stride(2).padding(1);
    assert_eq!(spec.output_extents([7, 8, 9]).unwrap(), [4, 4, 5]);
    let spec = ConvSpec::new(1, 1, 3).dilation(2);
    assert_eq!(spec.output_extents([5, 6, 7]).unwrap(), [1, 2, 3]);
    assert!(ConvSpec::new(1, 1, 3)
        .dilation(3)
        .output_extents([5, 5, 5])
        .is_err());
}

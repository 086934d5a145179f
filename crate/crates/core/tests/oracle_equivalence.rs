mod support;

use ivusnet::autograd::Graph;
use ivusnet::data::BinaryMask;
use ivusnet::metrics::{hausdorff, jaccard};
use ivusnet::nn::{ConvSpec, Padding};
use ivusnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{naive_conv2d, naive_hausdorff, naive_jaccard};

fn random_mask(rng: &mut ChaCha8Rng, fill: f64) -> BinaryMask {
    BinaryMask::new(16, 16, (0..256).map(|_| rng.random_bool(fill)).collect()).unwrap()
}

#[test]
fn conv_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..20 {
        let n = rng.random_range(1..3);
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let k = [1, 2, 3, 5][case % 4];
        let (stride, padding, pad) = match k {
            2 => (2, Padding::Valid, 0),
            _ => (1, Padding::SameZero, (k - 1) / 2),
        };
        let (h, w) = (rng.random_range(4..9) * 2, rng.random_range(4..9) * 2);
        let x = Tensor::<f32>::uniform(&[n, cin, h, w], -1.0, 1.0, &mut rng).unwrap();
        let wt = Tensor::<f32>::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f32>::uniform(&[cout], -1.0, 1.0, &mut rng).unwrap();
        let mut g = Graph::<f32>::new();
        let (xi, wi, bi) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        let y = g.conv2d(xi, wi, bi, ConvSpec { stride, padding }).unwrap();
        let expected = naive_conv2d(x.data(), [n, cin, h, w], wt.data(), [cout, cin, k, k], b.data(), stride, pad);
        let got = g.value(y).data();
        assert_eq!(got.len(), expected.len());
        for (a, e) in got.iter().zip(&expected) {
            assert!((*a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0), "case {case}: {a} vs {e}");
        }
    }
}

#[test]
fn jaccard_equals_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let fill = rng.random_range(0.0..1.0);
        let a = random_mask(&mut rng, fill);
        let b = random_mask(&mut rng, fill);
        assert_eq!(jaccard(&a, &b).unwrap(), naive_jaccard(&a.bits, &b.bits));
    }
}

#[test]
fn hausdorff_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
            let n = rng.random_range(1..40);
            (0..n).map(|_| (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect()
        };
        let a = pts(&mut rng);
        let b = pts(&mut rng);
        assert!((hausdorff(&a, &b, 1.0).unwrap() - naive_hausdorff(&a, &b)).abs() <= 1e-9);
    }
}

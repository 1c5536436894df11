//! Invariants checked over randomly generated inputs.

use proptest::prelude::*;
use segadapt::augment::{apply_geometric, apply_photometric, sample_photometric, GeometricSpec, PhotometricConfig};
use segadapt::losses::{consistency_loss, cross_entropy, discrepancy, max_squares, min_entropy, Discrepancy, LogitModel, TransformSet};
use segadapt::metrics::ConfusionMatrix;
use segadapt::rng::Seeds;
use segadapt::transformer::{supervised_logits, transfer_matrix, TransferNorm};
use segadapt::{Graph, Result, Tensor, Var};

fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = Seeds::new(seed).stream("prop");
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    tensor(&[3, h, w], seed, 1.0).map(|v| v.abs()).cast()
}

fn permute_channels(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let (l, hw) = (s[1], s[2] * s[3]);
    Tensor::from_fn(s.to_vec(), |i| {
        let (b, c, p) = (i / (l * hw), (i / hw) % l, i % hw);
        t.data()[(b * l + perm[c]) * hw + p]
    })
}

fn scalar(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transfer_rows_are_distributions(seed in any::<u64>(), l in 2usize..9, c in 1usize..6, scale in 0.1f64..20.0) {
        let mut g = Graph::new();
        let q = g.constant(tensor(&[l, c], seed, scale));
        let u = g.constant(tensor(&[c, l], seed ^ 1, scale));
        let w = transfer_matrix(&mut g, q, u, TransferNorm::Rows).unwrap();
        for row in g.value(w).data().chunks(l) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn supervised_logits_are_linear_in_unsupervised_logits(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (l, h, w) = (4, 3, 5);
        let wt = tensor(&[l, l], seed, 1.0);
        let x = tensor(&[1, l, h, w], seed ^ 2, 2.0);
        let y = tensor(&[1, l, h, w], seed ^ 3, 2.0);
        let apply = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let m = g.constant(wt.clone());
            let o = g.constant(t.clone());
            let s = supervised_logits(&mut g, &[m], o).unwrap();
            g.value(s).clone()
        };
        let mixed: Tensor<f64> = Tensor::from_fn(x.shape().to_vec(), |i| a * x.data()[i] + b * y.data()[i]);
        let (fx, fy, fm) = (apply(&x), apply(&y), apply(&mixed));
        for i in 0..fm.numel() {
            prop_assert!((fm.data()[i] - (a * fx.data()[i] + b * fy.data()[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn geometric_transforms_act_per_channel(seed in any::<u64>(), k in 0u8..4, c in 1usize..5) {
        let (h, w) = (8, 12);
        let spec = GeometricSpec::Rotate90 { src: (h, w), k };
        let t = tensor(&[c, h, w], seed, 1.0);
        let whole = apply_geometric(&spec, &t).unwrap();
        let (oh, ow) = spec.output_size();
        for ch in 0..c {
            let plane = Tensor::new([h, w], t.data()[ch * h * w..(ch + 1) * h * w].to_vec()).unwrap();
            let one = apply_geometric(&spec, &plane).unwrap();
            prop_assert_eq!(one.data(), &whole.data()[ch * oh * ow..(ch + 1) * oh * ow]);
        }
    }

    #[test]
    fn quarter_turns_compose_additively(seed in any::<u64>(), a in 0u8..4, b in 0u8..4) {
        let (h, w) = (6, 10);
        let t = tensor(&[2, h, w], seed, 1.0);
        let first = GeometricSpec::Rotate90 { src: (h, w), k: a };
        let second = GeometricSpec::Rotate90 { src: first.output_size(), k: b };
        let both = GeometricSpec::Rotate90 { src: (h, w), k: (a + b) % 4 };
        let twice = apply_geometric(&second, &apply_geometric(&first, &t).unwrap()).unwrap();
        prop_assert_eq!(twice, apply_geometric(&both, &t).unwrap());
    }

    #[test]
    fn inverses_undo_rotations_and_shuffles(seed in any::<u64>(), k in 0u8..4, perm in perm_strategy(6)) {
        let t = tensor(&[3, 8, 12], seed, 1.0);
        for spec in [
            GeometricSpec::Rotate90 { src: (8, 12), k },
            GeometricSpec::PatchShuffle { src: (8, 12), patch: 4, perm: perm.clone() },
        ] {
            let inv = spec.inverse().unwrap();
            prop_assert_eq!(&apply_geometric(&inv, &apply_geometric(&spec, &t).unwrap()).unwrap(), &t);
        }
    }

    #[test]
    fn photometric_keeps_shape_and_range(seed in any::<u64>(), strength in 0.0f32..=1.0) {
        let cfg = PhotometricConfig { strength, ..PhotometricConfig::default() };
        let mut rng = Seeds::new(seed).stream("spec");
        let spec = sample_photometric(&cfg, &mut rng).unwrap();
        let x = image(10, 14, seed);
        let y = apply_photometric(&spec, &x).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn miou_is_bounded_and_label_permutation_invariant(
        truth in prop::collection::vec(0u8..5, 1..200),
        noise in prop::collection::vec(0u8..5, 200),
        perm in perm_strategy(5),
    ) {
        let pred: Vec<u8> = truth.iter().zip(&noise).map(|(&t, &n)| if n < 2 { n } else { t }).collect();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&pred, &truth).unwrap();
        prop_assert_eq!(cm.total(), truth.len() as u64);
        let m = cm.miou().unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let relabel = |v: &[u8]| v.iter().map(|&x| perm[x as usize] as u8).collect::<Vec<_>>();
        let mut permuted = ConfusionMatrix::new(5);
        permuted.accumulate(&relabel(&pred), &relabel(&truth)).unwrap();
        prop_assert!((permuted.miou().unwrap() - m).abs() < 1e-12);
    }

    #[test]
    fn discrepancies_are_nonnegative_and_vanish_on_equal_inputs(seed in any::<u64>(), m in 0usize..5) {
        let metric = Discrepancy::ALL[m];
        let a = tensor(&[2, 4, 3, 3], seed, 3.0);
        let b = tensor(&[2, 4, 3, 3], seed ^ 5, 3.0);
        let d = scalar(|g| { let (x, y) = (g.constant(a.clone()), g.constant(b.clone())); discrepancy(g, metric, x, y) });
        prop_assert!(d >= 0.0);
        let z = scalar(|g| { let x = g.constant(a.clone()); discrepancy(g, metric, x, x) });
        prop_assert!(z.abs() < 1e-12);
    }

    #[test]
    fn losses_are_class_permutation_covariant(seed in any::<u64>(), perm in perm_strategy(5)) {
        let x = tensor(&[2, 5, 3, 4], seed, 4.0);
        let px = permute_channels(&x, &perm);
        let labels: Vec<usize> = (0..24).map(|i| (i * 7 + seed as usize) % 5).collect();
        // channel c of px holds class perm[c], so class j moves to inv[j]
        let mut inv = [0; 5];
        for (c, &p) in perm.iter().enumerate() { inv[p] = c; }
        let plabels: Vec<usize> = labels.iter().map(|&y| inv[y]).collect();
        let eval = |t: &Tensor<f64>, y: &[usize]| {
            [
                scalar(|g| { let v = g.constant(t.clone()); min_entropy(g, v) }),
                scalar(|g| { let v = g.constant(t.clone()); max_squares(g, v) }),
                scalar(|g| { let v = g.constant(t.clone()); cross_entropy(g, v, y) }),
            ]
        };
        let (a, b) = (eval(&x, &labels), eval(&px, &plabels));
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}

/// Fixed random linear map from pixels to logits.
struct Linear {
    g: Graph<f64>,
    w: Tensor<f64>,
}

impl LogitModel<f64> for Linear {
    fn graph(&mut self) -> &mut Graph<f64> {
        &mut self.g
    }

    fn logits(&mut self, images: &Tensor<f64>) -> Result<Var> {
        let s = images.shape().to_vec();
        let l = self.w.shape()[0];
        let mut out = vec![0.0; s[0] * l * s[2] * s[3]];
        let hw = s[2] * s[3];
        for b in 0..s[0] {
            for c in 0..l {
                for ch in 0..3 {
                    let wv = self.w.data()[c * 3 + ch];
                    for p in 0..hw {
                        out[(b * l + c) * hw + p] += wv * images.data()[(b * 3 + ch) * hw + p];
                    }
                }
            }
        }
        Ok(self.g.constant(Tensor::new([s[0], l, s[2], s[3]], out)?))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn consistency_loss_is_nonnegative(seed in any::<u64>(), k in 0u8..4, m in 0usize..5) {
        let mut model = Linear { g: Graph::new(), w: tensor(&[4, 3], seed, 2.0) };
        let images: Tensor<f64> = image(8, 8, seed).cast().reshape([1, 3, 8, 8]).unwrap();
        let o = model.logits(&images).unwrap();
        let mut rng = Seeds::new(seed).stream("spec");
        let set = TransformSet {
            photometric: vec![sample_photometric(&PhotometricConfig::default(), &mut rng).unwrap()],
            geometric: vec![GeometricSpec::Rotate90 { src: (8, 8), k }],
        };
        let l = consistency_loss(&mut model, &images, o, &set, Discrepancy::ALL[m]).unwrap();
        prop_assert!(model.g.value(l).item() >= 0.0);
    }
}

//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of scalar coordinates probed (all when larger than the store).
    pub samples: usize,
    /// Lower bound on the relative-error denominator, so that coordinates
    /// with vanishing gradients are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences on a random subset of parameter coordinates. `f` must be
/// deterministic: any randomness (dropout, mixing weights) has to come from
/// generators it seeds itself.
pub fn gradient_check<F>(store: &ParamStore, f: F, config: GradCheckConfig) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph) -> Result<Var, NnError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)
    };
    if !analytic.is_finite() {
        return Err(NnError::Gradient("non-finite analytic gradient".into()));
    }
    let coords: Vec<(usize, usize)> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id.0, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let picks: Vec<usize> = if config.samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        sample(&mut rng, coords.len(), config.samples).into_vec()
    };

    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = store.clone();
    for &p in &picks {
        let (pid, idx) = coords[p];
        let id = super::params::ParamId(pid);
        let original = store.value(id).data[idx];
        probe.value_mut(id).data[idx] = original + config.step;
        let plus = eval(&probe)?;
        probe.value_mut(id).data[idx] = original - config.step;
        let minus = eval(&probe)?;
        probe.value_mut(id).data[idx] = original;
        let numeric = (plus - minus) / (2.0 * config.step);
        let exact = analytic.get(id).map_or(0.0, |t| t.data[idx]);
        let denom = exact.abs().max(numeric.abs()).max(config.floor);
        let rel = (exact - numeric).abs() / denom;
        if !rel.is_finite() {
            return Err(NnError::Gradient(format!("non-finite difference at {}[{idx}]", store.name(id))));
        }
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((store.name(id).to_string(), idx));
            }
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::init_uniform;
    use crate::nn::{ModelConfig, Networks};
    use crate::score_io::{FrameDurations, MusicScore, ScoreEvent};
    use crate::tensor::Tensor2;
    use rand::Rng;

    /// Scalar `1^T (out * R) 1` with a fixed random `R`, so every output
    /// entry contributes with a distinct weight.
    fn reduce(g: &mut Graph, v: Var, seed: u64) -> Var {
        let (r, c) = g.value(v).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = g.constant(weights);
        let m = g.mul(v, w);
        let left = g.constant(Tensor2::filled(1, r, 1.0));
        let right = g.constant(Tensor2::filled(c, 1, 1.0));
        let s = g.matmul(left, m);
        g.matmul(s, right)
    }

    fn store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::default();
        for &(n, r, c) in shapes {
            s.insert(n, init_uniform(r, c, 1, &mut rng));
        }
        s
    }

    fn check(s: &ParamStore, f: impl Fn(&mut Graph) -> Result<Var, NnError>) -> f64 {
        let cfg = GradCheckConfig {
            samples: 200,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(s, f, cfg).unwrap();
        assert!(report.checked > 0);
        report.max_rel_error
    }

    macro_rules! op_check {
        ($name:ident, $shapes:expr, |$g:ident, $p:ident| $body:expr) => {
            #[test]
            fn $name() {
                let s = store(&$shapes, 11);
                let err = check(&s, |$g: &mut Graph| {
                    let $p: Vec<Var> = $g.store().ids().collect::<Vec<_>>().into_iter().map(|id| $g.param(id)).collect();
                    let out = $body;
                    Ok(reduce($g, out, 5))
                });
                assert!(err < 1e-4, "max relative error {err}");
            }
        };
    }

    op_check!(grad_matmul, [("a", 3, 4), ("b", 4, 2)], |g, p| g.matmul(p[0], p[1]));
    op_check!(grad_matmul_bt, [("a", 3, 4), ("b", 5, 4)], |g, p| g.matmul_bt(p[0], p[1]));
    op_check!(grad_add, [("a", 3, 4), ("b", 3, 4)], |g, p| g.add(p[0], p[1]));
    op_check!(grad_add_row, [("a", 3, 4), ("b", 1, 4)], |g, p| g.add_row(p[0], p[1]));
    op_check!(grad_mul, [("a", 3, 4), ("b", 3, 4)], |g, p| g.mul(p[0], p[1]));
    op_check!(grad_scale, [("a", 3, 4)], |g, p| g.scale(p[0], -1.7));
    op_check!(grad_relu, [("a", 4, 5)], |g, p| g.relu(p[0]));
    op_check!(grad_tanh, [("a", 4, 5)], |g, p| g.tanh(p[0]));
    op_check!(grad_layer_norm, [("x", 4, 6), ("gamma", 1, 6), ("beta", 1, 6)], |g, p| g
        .layer_norm(p[0], p[1], p[2], 1e-5));
    op_check!(grad_attention, [("q", 5, 8), ("k", 5, 8), ("v", 5, 8)], |g, p| g.attention(p[0], p[1], p[2], 2));
    op_check!(grad_gather, [("table", 6, 3)], |g, p| g.gather(p[0], &[4, 0, 4, 2]));
    op_check!(grad_repeat_rows, [("x", 3, 4)], |g, p| g.repeat_rows(p[0], &[2, 0, 3]));
    op_check!(grad_pad_rows, [("x", 3, 4)], |g, p| g.pad_rows(p[0], 5));
    op_check!(grad_slice_rows, [("x", 5, 4)], |g, p| g.slice_rows(p[0], 1, 3));
    op_check!(grad_unfold, [("x", 5, 3)], |g, p| g.unfold(p[0], 3));
    op_check!(grad_dropout, [("x", 5, 6)], |g, p| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        g.dropout(p[0], 0.3, &mut rng)
    });
    op_check!(grad_linear_comb, [("a", 2, 3), ("b", 2, 3)], |g, p| g.linear_comb(&[(p[0], 0.3), (p[1], -0.8)]));

    #[test]
    fn grad_l1_is_exact() {
        let s = store(&[("pred", 4, 3)], 2);
        let target = Tensor2::from_vec(3, 3, vec![5.0, -5.0, 5.0, -5.0, 5.0, -5.0, 5.0, -5.0, 5.0]);
        let err = check(&s, |g| {
            let p = g.param(crate::nn::ParamId(0));
            Ok(g.l1(p, &target))
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_cross_entropy() {
        let s = store(&[("logits", 4, 5)], 3);
        let err = check(&s, |g| {
            let p = g.param(crate::nn::ParamId(0));
            Ok(g.cross_entropy(p, &[1, 4, 0, 1]))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_full_models() {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ffn_width: 12,
            ffn_kernel: 3,
            mel_dims: 6,
            postnet_layers: 2,
            postnet_channels: 4,
            postnet_kernel: 3,
            predictor_blocks: 1,
            predictor_heads: 2,
            predictor_ffn_width: 10,
            predictor_positional_encoding: true,
            dropout: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets = Networks::new(&cfg, 5, &mut rng).unwrap();
        let score = MusicScore {
            phrase_id: "g".into(),
            events: vec![
                ScoreEvent { phoneme: 1, pitch: 60, onset: 0.0, offset: 0.1 },
                ScoreEvent { phoneme: 3, pitch: 64, onset: 0.1, offset: 0.2 },
            ],
        };
        let d = FrameDurations::new(vec![2, 3]);
        let target = Tensor2::from_vec(5, 6, (0..30).map(|i| (i as f64 * 0.37).sin() * 3.0).collect());
        let labels = d.expand(&score.phonemes());
        let err = check(&nets.store, |g| {
            let mut r = ChaCha8Rng::seed_from_u64(8);
            let (y, _) = nets.acoustic.forward(g, &score, &d, true, &mut r)?;
            let l1 = g.l1(y, &target);
            let (ph, _) = nets.predictor.forward(g, y, true, &mut r)?;
            let ce = g.cross_entropy(ph, &labels);
            Ok(g.linear_comb(&[(l1, 1.0), (ce, 0.5)]))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut s = ParamStore::default();
        s.insert("x", Tensor2::filled(1, 1, f64::NAN));
        let r = gradient_check(&s, |g| {
            let p = g.param(crate::nn::ParamId(0));
            Ok(g.scale(p, 2.0))
        }, GradCheckConfig::default());
        // The gradient of a scale is finite even at NaN inputs; the
        // difference quotient is not.
        assert!(matches!(r, Err(NnError::Gradient(_))));
    }
}

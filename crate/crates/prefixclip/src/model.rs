//! The dual-encoder model: both towers plus the learned temperature.

use crate::image::{ImageEncoder, ImageEncoderConfig};
use crate::optim::NamedParam;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TextEncoderConfig};

/// Initial temperature is `1 / 0.07`; the parameter is its logarithm.
pub fn tau_init_log() -> f64 {
    (1.0f64 / 0.07).ln()
}

pub struct DualEncoderModel {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub log_tau: Tensor,
}

impl DualEncoderModel {
    /// Every parameter draws from an init stream named after it, so the
    /// model is a pure function of `(configs, vocab_size, rng seed)`.
    pub fn init(
        text_cfg: TextEncoderConfig,
        image_cfg: ImageEncoderConfig,
        vocab_size: usize,
        rng: &Rng,
    ) -> DualEncoderModel {
        DualEncoderModel {
            text: TextEncoder::init(text_cfg, vocab_size, rng),
            image: ImageEncoder::init(image_cfg, rng),
            log_tau: Tensor::param(&[], vec![tau_init_log()]).expect("finite init"),
        }
    }

    /// All trainable parameters; the order is fixed and the names are
    /// unique, which checkpointing and optimizer state rely on.
    pub fn params(&self) -> Vec<NamedParam> {
        let mut out = self.text.params();
        out.extend(self.image.params());
        out.push(NamedParam { name: "log_tau".into(), tensor: self.log_tau.clone(), decay: false });
        out
    }

    /// Effective temperature after the ceiling, for logging.
    pub fn tau(&self) -> f64 {
        self.log_tau.item().exp().min(crate::loss::TAU_MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{max_rel_error, FD_STEP, FD_TOL};
    use crate::image::ImageSample;
    use crate::loss::{clip_loss, similarity_matrix, unicl_loss, PositiveMask};
    use crate::tensor::TensorError;
    use crate::vocab::{TokenSequence, BOS, EOS, FIRST_CONTENT_ID, PAD, PREFIX_CAPTION, PREFIX_PROMPT};
    use std::collections::HashSet;

    fn model(seed: u64) -> DualEncoderModel {
        DualEncoderModel::init(
            TextEncoderConfig::default(),
            ImageEncoderConfig::default(),
            64,
            &Rng::from_seed(seed),
        )
    }

    #[test]
    fn fresh_temperature_matches_pinned_value() {
        let m = model(1);
        assert!((m.tau() - 1.0 / 0.07).abs() < 1e-9);
        assert!((m.tau() - 14.285714285714286).abs() < 1e-9);
    }

    #[test]
    fn param_names_are_unique_and_stable() {
        let names: Vec<String> = model(1).params().iter().map(|p| p.name.clone()).collect();
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len(), "duplicate parameter names");
        assert_eq!(names, model(2).params().iter().map(|p| p.name.clone()).collect::<Vec<_>>());
        assert!(names.contains(&"text.token_table".to_string()));
        assert!(names.contains(&"image.b1.w2".to_string()));
        assert_eq!(names.last().unwrap(), "log_tau");
    }

    #[test]
    fn decay_policy_spares_vectors_and_temperature() {
        for p in model(1).params() {
            let is_matrix = p.tensor.ndim() == 2;
            assert_eq!(p.decay, is_matrix, "decay policy wrong for {}", p.name);
        }
    }

    fn tiny_model(seed: u64) -> DualEncoderModel {
        let text = TextEncoderConfig { layers: 1, heads: 1, d_model: 4, mlp_ratio: 2, max_len: 6, d_out: 4 };
        let image =
            ImageEncoderConfig { side: 4, chans: 1, patch: 2, layers: 1, heads: 1, d_model: 4, mlp_ratio: 2, d_out: 4 };
        DualEncoderModel::init(text, image, 12, &Rng::from_seed(seed))
    }

    /// Random batch exercising PAD masking, both prefix rows, and repeated
    /// content ids (shared embedding rows accumulate gradient).
    fn tiny_batch(seed: u64) -> (Vec<TokenSequence>, Vec<ImageSample>) {
        let mut rng = Rng::from_seed(seed);
        let prefixes = [PREFIX_PROMPT, PREFIX_CAPTION];
        let seqs = (0..4)
            .map(|i| {
                let body = 1 + rng.range_usize(3);
                let mut ids = vec![BOS, prefixes[i % 2]];
                for _ in 0..body {
                    ids.push(FIRST_CONTENT_ID + rng.range_usize(7));
                }
                ids.push(EOS);
                let valid = ids.len();
                ids.resize(6, PAD);
                TokenSequence { ids, valid }
            })
            .collect();
        let cfg = ImageEncoderConfig { side: 4, chans: 1, patch: 2, layers: 1, heads: 1, d_model: 4, mlp_ratio: 2, d_out: 4 };
        let imgs = (0..4)
            .map(|_| {
                let px = (0..cfg.pixel_count()).map(|_| rng.uniform()).collect();
                ImageSample::new(&cfg, px).unwrap()
            })
            .collect();
        (seqs, imgs)
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        for (trial, multi_positive) in [(0u64, false), (1, true)] {
            let m = tiny_model(40 + trial);
            let (seqs, imgs) = tiny_batch(50 + trial);
            let labels: Vec<u64> = if multi_positive { vec![3, 3, 9, 4] } else { vec![0, 1, 2, 3] };
            let mask = PositiveMask::from_labels(&labels);
            // Tensor clones share storage, so perturbing these reaches the
            // copies the closure captures.
            let tensors: Vec<Tensor> = m.params().iter().map(|p| p.tensor.clone()).collect();
            let loss = move || {
                let u = m.image.encode(&imgs)?;
                let v = m.text.encode(&seqs)?;
                let sim = similarity_matrix(&u, &v, &m.log_tau)
                    .map_err(|e| TensorError::Invalid { op: "sim", msg: e.to_string() })?;
                let out = if multi_positive { unicl_loss(&sim, &mask) } else { clip_loss(&sim) };
                out.map_err(|e| TensorError::Invalid { op: "loss", msg: e.to_string() })
            };
            let err = max_rel_error(&loss, &tensors, FD_STEP).unwrap();
            assert!(err < FD_TOL, "trial {trial} multi_positive={multi_positive}: err = {err}");
        }
    }

    #[test]
    fn same_seed_reproduces_every_parameter() {
        let (a, b) = (model(9), model(9));
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.tensor.to_vec(), pb.tensor.to_vec(), "param {}", pa.name);
        }
        let c = model(10);
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(pa, pc)| pa.tensor.to_vec() != pc.tensor.to_vec());
        assert!(differs, "different seeds must change the init");
    }
}

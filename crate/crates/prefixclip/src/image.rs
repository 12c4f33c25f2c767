//! Patch-based vision transformer encoder with mean pooling.
//!
//! Images are fixed-size float canvases in `[0, 1]`, split into
//! non-overlapping patches, linearly embedded with learned positions, run
//! through the shared bidirectional trunk, mean-pooled over patches and
//! projected into the shared space. Embeddings are unnormalized.

use serde::{Deserialize, Serialize};

use crate::blocks::{init_matrix, TrunkParams};
use crate::optim::NamedParam;
use crate::rng::Rng;
use crate::tensor::{patch_map, AttnMeta, Result, Tensor, TensorError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ImageEncoderConfig {
    pub side: usize,
    pub chans: usize,
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub d_out: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            side: 16,
            chans: 3,
            patch: 4,
            layers: 2,
            heads: 2,
            d_model: 32,
            mlp_ratio: 4,
            d_out: 32,
        }
    }
}

impl ImageEncoderConfig {
    pub fn patches(&self) -> usize {
        let g = self.side / self.patch;
        g * g
    }

    pub fn pixel_count(&self) -> usize {
        self.side * self.side * self.chans
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_out == 0 {
            return Err("image encoder dimensions must be positive".into());
        }
        if self.patch == 0 || self.side % self.patch != 0 {
            return Err(format!("patch {} does not divide image side {}", self.patch, self.side));
        }
        if self.d_model % self.heads != 0 {
            return Err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.chans == 0 {
            return Err("images need at least one channel".into());
        }
        Ok(())
    }
}

/// One image: channel-interleaved rows, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(cfg: &ImageEncoderConfig, pixels: Vec<f64>) -> Result<ImageSample> {
        if pixels.len() != cfg.pixel_count() {
            return Err(TensorError::Invalid {
                op: "image_sample",
                msg: format!("expected {} pixel values, got {}", cfg.pixel_count(), pixels.len()),
            });
        }
        if let Some(&bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TensorError::Invalid {
                op: "image_sample",
                msg: format!("pixel value {bad} outside [0, 1]"),
            });
        }
        Ok(ImageSample { pixels })
    }
}

/// Pads by two zero pixels on every side, then crops back at a random
/// offset. Training-time augmentation only; offsets `(2, 2)` reproduce the
/// original image.
pub fn random_crop(cfg: &ImageEncoderConfig, img: &ImageSample, rng: &mut Rng) -> ImageSample {
    const PAD: usize = 2;
    let (side, ch) = (cfg.side, cfg.chans);
    let dy = rng.range_usize(2 * PAD + 1);
    let dx = rng.range_usize(2 * PAD + 1);
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..side {
        for x in 0..side {
            // source position in the padded canvas, shifted by the offset
            let sy = (y + dy) as isize - PAD as isize;
            let sx = (x + dx) as isize - PAD as isize;
            if (0..side as isize).contains(&sy) && (0..side as isize).contains(&sx) {
                let src = ((sy as usize * side) + sx as usize) * ch;
                let dst = (y * side + x) * ch;
                out[dst..dst + ch].copy_from_slice(&img.pixels[src..src + ch]);
            }
        }
    }
    ImageSample { pixels: out }
}

pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    pos_table: Tensor,
    trunk: TrunkParams,
    proj: Tensor,
}

impl ImageEncoder {
    pub fn init(cfg: ImageEncoderConfig, rng: &Rng) -> ImageEncoder {
        let psz = cfg.patch * cfg.patch * cfg.chans;
        let trunk = TrunkParams::init(rng, "image", cfg.layers, cfg.d_model, cfg.d_model * cfg.mlp_ratio);
        ImageEncoder {
            patch_w: init_matrix(rng, "image.patch_w", psz, cfg.d_model),
            patch_b: Tensor::param(&[cfg.d_model], vec![0.0; cfg.d_model]).expect("zeros"),
            pos_table: init_matrix(rng, "image.pos_table", cfg.patches(), cfg.d_model),
            proj: init_matrix(rng, "image.proj", cfg.d_model, cfg.d_out),
            trunk,
            cfg,
        }
    }

    pub fn params(&self) -> Vec<NamedParam> {
        let mut out = vec![
            NamedParam { name: "image.patch_w".into(), tensor: self.patch_w.clone(), decay: true },
            NamedParam { name: "image.patch_b".into(), tensor: self.patch_b.clone(), decay: false },
            NamedParam { name: "image.pos_table".into(), tensor: self.pos_table.clone(), decay: true },
        ];
        self.trunk.params("image", &mut out);
        out.push(NamedParam { name: "image.proj".into(), tensor: self.proj.clone(), decay: true });
        out
    }

    /// Embeds a batch of images; rows follow input order. The pixel tensor
    /// is a constant, so gradients stop at the patch projection.
    pub fn encode(&self, samples: &[ImageSample]) -> Result<Tensor> {
        if samples.is_empty() {
            return Err(TensorError::Invalid { op: "encode_image", msg: "empty batch".into() });
        }
        let b = samples.len();
        let (side, ch) = (self.cfg.side, self.cfg.chans);
        let mut pixels = Vec::with_capacity(b * self.cfg.pixel_count());
        for s in samples {
            if s.pixels.len() != self.cfg.pixel_count() {
                return Err(TensorError::Invalid {
                    op: "encode_image",
                    msg: format!("sample has {} pixels, encoder wants {}", s.pixels.len(), self.cfg.pixel_count()),
                });
            }
            pixels.extend_from_slice(&s.pixels);
        }
        let p = self.cfg.patches();
        let psz = self.cfg.patch * self.cfg.patch * ch;
        let canvas = Tensor::from_vec(&[b, side, side, ch], pixels)?;
        let map = patch_map(b, side, ch, self.cfg.patch)?;
        let patches = canvas.gather(map, &[b * p, psz])?;
        let pos: Vec<usize> = (0..b * p).map(|i| i % p).collect();
        let x = patches.matmul(&self.patch_w)?.add(&self.patch_b)?.add(&self.pos_table.embed(&pos)?)?;
        let meta = AttnMeta {
            batch: b,
            len: p,
            heads: self.cfg.heads,
            causal: false,
            valid: vec![p; b],
        };
        let h = self.trunk.forward(x, &meta, None)?;
        h.reshape(&[b, p, self.cfg.d_model])?.mean_axis(1)?.matmul(&self.proj)
    }
}

// ── raw tensor files ──
//
// Interchange format for image stacks: a u64 rank, u64 dims, then the values
// as little-endian f64 in row-major order.

pub fn write_tensor_file(path: &std::path::Path, dims: &[usize], data: &[f64]) -> std::io::Result<()> {
    use std::io::Write;
    let numel: usize = dims.iter().product();
    assert_eq!(numel, data.len(), "dims {dims:?} disagree with {} values", data.len());
    let mut buf = Vec::with_capacity(8 * (1 + dims.len() + data.len()));
    buf.extend_from_slice(&(dims.len() as u64).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)
}

pub fn read_tensor_file(path: &std::path::Path) -> std::io::Result<(Vec<usize>, Vec<f64>)> {
    let bad = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{path:?}: {msg}"));
    let bytes = std::fs::read(path)?;
    let word = |i: usize| -> Option<u64> {
        bytes.get(i * 8..i * 8 + 8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    };
    let rank = word(0).ok_or_else(|| bad("truncated rank"))? as usize;
    if rank == 0 || rank > 8 {
        return Err(bad("rank out of range"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(word(1 + i).ok_or_else(|| bad("truncated dims"))? as usize);
    }
    let numel: usize = dims.iter().product();
    let body = &bytes[(1 + rank) * 8..];
    if body.len() != numel * 8 {
        return Err(bad("body length disagrees with dims"));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ImageEncoderConfig {
        ImageEncoderConfig::default()
    }

    fn gradient_image(c: &ImageEncoderConfig, scale: f64) -> ImageSample {
        let n = c.pixel_count();
        let pixels = (0..n).map(|i| scale * i as f64 / n as f64).collect();
        ImageSample::new(c, pixels).unwrap()
    }

    #[test]
    fn sample_validation() {
        let c = cfg();
        assert!(ImageSample::new(&c, vec![0.5; 10]).is_err());
        assert!(ImageSample::new(&c, vec![1.5; c.pixel_count()]).is_err());
        assert!(ImageSample::new(&c, vec![0.5; c.pixel_count()]).is_ok());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let c = cfg();
        let enc = ImageEncoder::init(c.clone(), &Rng::from_seed(3));
        let batch = vec![gradient_image(&c, 1.0), gradient_image(&c, 0.5)];
        let e = enc.encode(&batch).unwrap();
        assert_eq!(e.shape(), vec![2, 32]);
        let enc2 = ImageEncoder::init(c, &Rng::from_seed(3));
        assert_eq!(e.to_vec(), enc2.encode(&batch).unwrap().to_vec());
    }

    #[test]
    fn batch_rows_are_independent() {
        let c = cfg();
        let enc = ImageEncoder::init(c.clone(), &Rng::from_seed(3));
        let a = gradient_image(&c, 1.0);
        let b = gradient_image(&c, 0.25);
        let alone = enc.encode(std::slice::from_ref(&a)).unwrap().to_vec();
        let together = enc.encode(&[a, b]).unwrap().to_vec();
        assert_eq!(alone, together[..32].to_vec());
    }

    #[test]
    fn different_images_embed_differently() {
        let c = cfg();
        let enc = ImageEncoder::init(c.clone(), &Rng::from_seed(3));
        let e = enc.encode(&[gradient_image(&c, 1.0), gradient_image(&c, 0.2)]).unwrap().to_vec();
        assert_ne!(e[..32], e[32..]);
    }

    #[test]
    fn gradients_reach_the_patch_projection() {
        let c = cfg();
        let enc = ImageEncoder::init(c.clone(), &Rng::from_seed(3));
        let loss = enc.encode(&[gradient_image(&c, 1.0)]).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let any = enc.params().iter().any(|p| {
            p.tensor.grad().map(|g| g.iter().any(|&x| x != 0.0)).unwrap_or(false)
        });
        assert!(any);
    }

    #[test]
    fn random_crop_keeps_range_and_differs_sometimes() {
        let c = cfg();
        let img = gradient_image(&c, 1.0);
        let mut rng = Rng::from_seed(9);
        let mut any_diff = false;
        for _ in 0..10 {
            let crop = random_crop(&c, &img, &mut rng);
            assert_eq!(crop.pixels.len(), img.pixels.len());
            assert!(crop.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            any_diff |= crop.pixels != img.pixels;
        }
        assert!(any_diff, "ten crops should not all be the identity");
    }

    #[test]
    fn crop_offset_center_is_identity() {
        // scan seeds for the (2, 2) offset to confirm the identity mapping
        let c = cfg();
        let img = gradient_image(&c, 1.0);
        for seed in 0..200 {
            let mut rng = Rng::from_seed(seed);
            let (dy, dx) = (rng.range_usize(5), rng.range_usize(5));
            if (dy, dx) == (2, 2) {
                let mut rng = Rng::from_seed(seed);
                let crop = random_crop(&c, &img, &mut rng);
                assert_eq!(crop.pixels, img.pixels);
                return;
            }
        }
        panic!("no seed produced the centered offset");
    }

    #[test]
    fn config_validation_catches_bad_patch() {
        let c = ImageEncoderConfig { patch: 5, ..cfg() };
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn tensor_file_round_trips_and_rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.bin");
        let dims = vec![2, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25).collect();
        write_tensor_file(&path, &dims, &data).unwrap();
        let (d2, v2) = read_tensor_file(&path).unwrap();
        assert_eq!(d2, dims);
        assert_eq!(v2, data);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_tensor_file(&path).is_err());
    }
}

//! Patch autoencoder mapping an image to a g×g grid of latent vectors.
//! Each non-overlapping stride×stride patch is encoded independently, which is
//! a strided convolution with kernel = stride.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envsim::Image;
use crate::error::{Error, Result};
use crate::nn::{AdamW, Graph, NodeId, ParamStore, Tensor};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub grid: usize,
    pub channels: usize,
    pub hidden: usize,
    pub steps: usize,
    /// Patches per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub psnr_floor: f64,
    pub min_images: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            channels: 32,
            hidden: 128,
            steps: 1500,
            batch: 128,
            lr: 2e-3,
            psnr_floor: 25.0,
            min_images: 1000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub loss_curve: Vec<f64>,
    pub train_psnr: f64,
    pub heldout_psnr: f64,
    pub images: usize,
    pub param_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    pub image_size: usize,
    pub grid: usize,
    pub channels: usize,
    pub hidden: usize,
    pub params: ParamStore,
    /// Per-channel latent statistics used to standardize encoder output.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const NAMES: [&str; 8] = [
    "enc.w1", "enc.b1", "enc.w2", "enc.b2", "dec.w1", "dec.b1", "dec.w2", "dec.b2",
];
const OUT_MARGIN: f64 = 0.02;

impl LatentCodec {
    pub fn new(image_size: usize, cfg: &CodecConfig) -> Result<Self> {
        if cfg.grid == 0 || !image_size.is_multiple_of(cfg.grid) {
            return Err(Error::Config(format!(
                "latent grid {} must divide image size {image_size}",
                cfg.grid
            )));
        }
        if cfg.channels == 0 || cfg.hidden == 0 {
            return Err(Error::Config("codec channels and hidden width must be positive".into()));
        }
        let stride = image_size / cfg.grid;
        let p = stride * stride * 3;
        let mut rng = rng_for(cfg.seed, "codec-init");
        let mut init = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
            Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
        };
        let shapes = [
            (p, cfg.hidden),
            (1, cfg.hidden),
            (cfg.hidden, cfg.channels),
            (1, cfg.channels),
        ];
        let dshapes = [(cfg.channels, cfg.hidden), (1, cfg.hidden), (cfg.hidden, p), (1, p)];
        let mut params = ParamStore::new();
        for (name, &(r, c)) in NAMES.iter().zip(shapes.iter().chain(dshapes.iter())) {
            let t = if r == 1 { Tensor::zeros(1, c) } else { init(r, c) };
            params.add(name, t);
        }
        Ok(Self {
            image_size,
            grid: cfg.grid,
            channels: cfg.channels,
            hidden: cfg.hidden,
            params,
            mean: vec![0.0; cfg.channels],
            std: vec![1.0; cfg.channels],
        })
    }

    pub fn stride(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.width != self.image_size || image.height != self.image_size {
            return Err(Error::Input(format!(
                "image is {}x{}, codec expects {}x{}",
                image.width, image.height, self.image_size, self.image_size
            )));
        }
        Ok(())
    }

    /// Rows are patches in raster order, values in [0, 1].
    fn patches(&self, image: &Image) -> Tensor {
        patchify(image, self.stride())
    }

    fn encode_graph(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let [w1, b1, w2, b2] = [0, 1, 2, 3].map(|i| g.param_named(NAMES[i]));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let z = g.matmul(h, w2);
        g.add_row(z, b2)
    }

    fn decode_graph(&self, g: &mut Graph, z: NodeId) -> NodeId {
        let [w1, b1, w2, b2] = [4, 5, 6, 7].map(|i| g.param_named(NAMES[i]));
        let h = g.matmul(z, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let y = g.matmul(h, w2);
        let y = g.add_row(y, b2);
        // slightly widened so that pure black and white are reachable
        let y = g.sigmoid(y);
        let y = g.scale(y, 1.0 + 2.0 * OUT_MARGIN);
        let shift = g.input(Tensor::from_vec(
            1,
            self.stride() * self.stride() * 3,
            vec![-OUT_MARGIN; self.stride() * self.stride() * 3],
        ));
        g.add_row(y, shift)
    }

    fn centered(t: &Tensor) -> Tensor {
        Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|v| 2.0 * v - 1.0).collect())
    }

    fn raw_latents(&self, patches: &Tensor) -> Tensor {
        let mut g = Graph::new(&self.params);
        let x = g.input(Self::centered(patches));
        let z = self.encode_graph(&mut g, x);
        g.value(z).clone()
    }

    /// Standardized latent cells in raster order.
    pub fn encode(&self, image: &Image) -> Result<Vec<Vec<f64>>> {
        self.check(image)?;
        let z = self.raw_latents(&self.patches(image));
        Ok((0..z.rows)
            .map(|r| {
                z.row(r)
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (v - self.mean[c]) / self.std[c])
                    .collect()
            })
            .collect())
    }

    pub fn decode(&self, cells: &[Vec<f64>]) -> Result<Image> {
        Image::from_unit(self.image_size, self.image_size, &self.decode_unit(cells)?)
    }

    /// Reconstruction in [0, 1], row-major RGB, before quantization.
    pub fn decode_unit(&self, cells: &[Vec<f64>]) -> Result<Vec<f64>> {
        if cells.len() != self.cells() || cells.iter().any(|c| c.len() != self.channels) {
            return Err(Error::Input(format!(
                "decode expects {} cells of {} channels",
                self.cells(),
                self.channels
            )));
        }
        let raw: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(k, v)| v * self.std[k] + self.mean[k])
                    .collect()
            })
            .collect();
        let mut g = Graph::new(&self.params);
        let z = g.input(Tensor::from_rows(&raw, self.channels));
        let y = self.decode_graph(&mut g, z);
        let mut unit = unpatchify_unit(g.value(y), self.image_size, self.stride());
        unit.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(unit)
    }

    pub fn round_trip(&self, image: &Image) -> Result<Image> {
        self.decode(&self.encode(image)?)
    }

    /// Fits on `images`, holding out every tenth one for the PSNR gate. The
    /// returned codec is frozen.
    pub fn fit(images: &[Image], image_size: usize, cfg: &CodecConfig) -> Result<(Self, CodecReport)> {
        if images.len() < cfg.min_images {
            return Err(Error::Input(format!(
                "codec fit needs at least {} images, got {}",
                cfg.min_images,
                images.len()
            )));
        }
        let mut codec = Self::new(image_size, cfg)?;
        for im in images {
            codec.check(im)?;
        }
        let (train, held): (Vec<&Image>, Vec<&Image>) = if images.len() >= 10 {
            let mut tr = Vec::new();
            let mut he = Vec::new();
            for (i, im) in images.iter().enumerate() {
                if i % 10 == 9 {
                    he.push(im)
                } else {
                    tr.push(im)
                }
            }
            (tr, he)
        } else {
            (images.iter().collect(), images.iter().collect())
        };
        let per_image = codec.cells();
        let patch_dim = codec.stride() * codec.stride() * 3;
        let all: Vec<Tensor> = train.iter().map(|im| codec.patches(im)).collect();
        let mut index: Vec<(usize, usize)> = (0..all.len())
            .flat_map(|i| (0..per_image).map(move |p| (i, p)))
            .collect();
        let mut rng = rng_for(cfg.seed, "codec-fit");
        let mut opt = AdamW::new(&codec.params, cfg.lr, (cfg.steps / 20) as u64, 0.0);
        let mut curve = Vec::with_capacity(cfg.steps);
        let mut cursor = index.len();
        for _ in 0..cfg.steps {
            let mut rows = Vec::with_capacity(cfg.batch * patch_dim);
            for _ in 0..cfg.batch {
                if cursor >= index.len() {
                    index.shuffle(&mut rng);
                    cursor = 0;
                }
                let (i, p) = index[cursor];
                cursor += 1;
                rows.extend_from_slice(all[i].row(p));
            }
            let x01 = Tensor::from_vec(cfg.batch, patch_dim, rows);
            let target = Arc::new(x01.clone());
            let grads = {
                let mut g = Graph::new(&codec.params);
                let x = g.input(Self::centered(&x01));
                let z = codec.encode_graph(&mut g, x);
                let y = codec.decode_graph(&mut g, z);
                let l = g.mse(y, target);
                curve.push(g.value(l).item());
                g.backward(l)
            };
            opt.update(&mut codec.params, &grads);
        }
        if curve.last().is_some_and(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss {
                component: "codec reconstruction".into(),
            });
        }

        // latent statistics over the training images
        let c = codec.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0.0;
        for p in &all {
            let z = codec.raw_latents(p);
            for r in 0..z.rows {
                for (k, v) in z.row(r).iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1.0;
            }
        }
        codec.mean = sum.iter().map(|s| s / count).collect();
        codec.std = sq
            .iter()
            .zip(&codec.mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-4))
            .collect();
        codec.params.freeze_where(|_| true);

        let train_psnr = codec.psnr(&train)?;
        let heldout_psnr = codec.psnr(&held)?;
        let report = CodecReport {
            loss_curve: curve,
            train_psnr,
            heldout_psnr,
            images: images.len(),
            param_hash: codec.param_hash(),
        };
        if heldout_psnr < cfg.psnr_floor {
            let tail: Vec<String> = report
                .loss_curve
                .iter()
                .rev()
                .step_by(100)
                .take(10)
                .map(|v| format!("{v:.5}"))
                .collect();
            return Err(Error::Runtime(format!(
                "codec did not converge: held-out PSNR {heldout_psnr:.2} dB below floor {:.2} dB (loss every 100 steps from the end: {})",
                cfg.psnr_floor,
                tail.join(", ")
            )));
        }
        Ok((codec, report))
    }

    /// PSNR in dB of pooled round-trip MSE over `images`, values in [0, 1].
    pub fn psnr(&self, images: &[&Image]) -> Result<f64> {
        let mut se = 0.0;
        let mut n = 0.0f64;
        for im in images {
            let rec = self.round_trip(im)?;
            for (a, b) in im.to_unit().iter().zip(rec.to_unit()) {
                se += (a - b) * (a - b);
                n += 1.0;
            }
        }
        Ok(psnr_from_mse(se / n.max(1.0)))
    }

    pub fn param_hash(&self) -> String {
        self.params.hash_where(|_| true)
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Splits an image into stride×stride patches in raster order; each row holds
/// the patch pixels row-major with RGB interleaved, scaled to [0, 1].
pub fn patchify(image: &Image, stride: usize) -> Tensor {
    let g = image.width / stride;
    let unit = image.to_unit();
    let mut out = Tensor::zeros(g * (image.height / stride), stride * stride * 3);
    for pr in 0..image.height / stride {
        for pc in 0..g {
            let row = out.row_mut(pr * g + pc);
            let mut k = 0;
            for y in 0..stride {
                for x in 0..stride {
                    let base = ((pr * stride + y) * image.width + pc * stride + x) * 3;
                    row[k..k + 3].copy_from_slice(&unit[base..base + 3]);
                    k += 3;
                }
            }
        }
    }
    out
}

pub fn unpatchify(patches: &Tensor, size: usize, stride: usize) -> Image {
    Image::from_unit(size, size, &unpatchify_unit(patches, size, stride)).expect("sizes agree")
}

pub fn unpatchify_unit(patches: &Tensor, size: usize, stride: usize) -> Vec<f64> {
    let g = size / stride;
    let mut unit = vec![0.0; size * size * 3];
    for pr in 0..g {
        for pc in 0..g {
            let row = patches.row(pr * g + pc);
            let mut k = 0;
            for y in 0..stride {
                for x in 0..stride {
                    let base = ((pr * stride + y) * size + pc * stride + x) * 3;
                    unit[base..base + 3].copy_from_slice(&row[k..k + 3]);
                    k += 3;
                }
            }
        }
    }
    unit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trip() {
        let mut im = Image::filled(16, 16, [10, 20, 30]);
        im.data[3 * (5 * 16 + 9)] = 200;
        let p = patchify(&im, 4);
        assert_eq!(p.shape(), (16, 48));
        assert_eq!(unpatchify(&p, 16, 4), im);
    }

    #[test]
    fn constant_images_reconstruct() {
        let colors = [
            [0u8, 0, 0],
            [255, 255, 255],
            [200, 180, 150],
            [40, 70, 220],
            [220, 40, 40],
            [90, 90, 90],
        ];
        let images: Vec<Image> = colors.iter().map(|&c| Image::filled(16, 16, c)).collect();
        let cfg = CodecConfig {
            grid: 2,
            channels: 4,
            hidden: 16,
            steps: 2500,
            batch: 16,
            lr: 1e-2,
            psnr_floor: 0.0,
            min_images: 1,
            seed: 1,
        };
        let (codec, report) = LatentCodec::fit(&images, 16, &cfg).unwrap();
        for im in images.iter() {
            let rec = codec.decode_unit(&codec.encode(im).unwrap()).unwrap();
            let err: f64 = im.to_unit().iter().zip(&rec).map(|(a, b)| (a - b).abs()).sum::<f64>() / rec.len() as f64;
            assert!(err <= 1e-3, "per-pixel error {err} for {:?}", &im.data[..3]);
        }
        assert!(report.train_psnr > 30.0);
        assert!(codec.params.params.iter().all(|p| p.frozen));
        assert!(LatentCodec::fit(&images, 16, &CodecConfig { min_images: 100, ..cfg }).is_err());
    }
}

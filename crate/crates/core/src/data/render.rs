use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::modality::Modality;

/// Image size and rendering difficulty knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub signature_dim: usize,
    /// Body stripe layout: `rows x cols` cells inside the ellipse.
    pub cell_rows: usize,
    pub cell_cols: usize,
    /// Maximum translation in pixels along each axis.
    pub jitter: i32,
    pub noise_sigma: f64,
    pub max_rectangles: usize,
    /// Per-capture perturbation of the identity signature (pose/lighting).
    pub instance_sigma: f64,
    /// Scale applied to the projected signature before the sigmoid.
    pub gain: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 16,
            signature_dim: 16,
            cell_rows: 8,
            cell_cols: 2,
            jitter: 2,
            noise_sigma: 0.05,
            max_rectangles: 3,
            instance_sigma: 0.5,
            gain: 1.5,
        }
    }
}

/// One capture of one identity. All randomness of the render flows from
/// the seeds stored here and the dataset seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub id: u32,
    pub modality: Modality,
    pub instance: u32,
    pub dx: i32,
    pub dy: i32,
    pub noise_seed: u64,
    pub clutter_seed: u64,
}

/// splitmix64 finalizer, used to derive independent stream seeds.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x6e66_735f_6461_7461u64, |acc, &p| mix(acc ^ mix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

const TAG_SIGNATURE: u64 = 1;
const TAG_MAP: u64 = 2;
const TAG_INSTANCE: u64 = 3;

/// The identity's latent signature: standard normal, a pure function of
/// `(dataset_seed, id)`.
pub fn identity_signature(dataset_seed: u64, id: u32, dim: usize) -> Vec<f64> {
    let mut rng = stream(&[dataset_seed, TAG_SIGNATURE, u64::from(id)]);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Fixed linear map from signature to cell intensities for one channel of
/// one modality, `[cells, dim]` row-major, scaled by `1/sqrt(dim)`.
pub fn modality_map(dataset_seed: u64, modality: Modality, channel: usize, cells: usize, dim: usize) -> Vec<f64> {
    let mut rng = stream(&[dataset_seed, TAG_MAP, modality.index() as u64, channel as u64]);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..cells * dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Precomputed per-dataset rendering state.
#[derive(Clone, Debug)]
pub struct Renderer {
    pub config: RenderConfig,
    pub dataset_seed: u64,
    maps: [Vec<Vec<f64>>; 2],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Renderer {
    pub fn new(config: RenderConfig, dataset_seed: u64) -> Self {
        let cells = config.cell_rows * config.cell_cols;
        let maps = Modality::ALL.map(|m| {
            (0..m.channels())
                .map(|c| modality_map(dataset_seed, m, c, cells, config.signature_dim))
                .collect()
        });
        Self {
            config,
            dataset_seed,
            maps,
        }
    }

    pub fn pixels_per_image(&self, modality: Modality) -> usize {
        modality.channels() * self.config.height * self.config.width
    }

    /// Whether pixel `(y, x)` lies on the body of an unjittered render.
    pub fn body_mask(&self, y: usize, x: usize, dy: i32, dx: i32) -> Option<(usize, usize)> {
        let cfg = &self.config;
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let cy = h / 2.0 + f64::from(dy);
        let cx = w / 2.0 + f64::from(dx);
        let (ay, ax) = (h * 0.4, w * 0.375);
        let (py, px) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
        if (py / ay).powi(2) + (px / ax).powi(2) > 1.0 {
            return None;
        }
        let row = (((py + ay) / (2.0 * ay)) * cfg.cell_rows as f64).floor() as usize;
        let col = (((px + ax) / (2.0 * ax)) * cfg.cell_cols as f64).floor() as usize;
        Some((row.min(cfg.cell_rows - 1), col.min(cfg.cell_cols - 1)))
    }

    /// Renders one capture as `[C, H, W]` values in `[0, 1]`.
    pub fn render(&self, spec: &SampleSpec) -> Vec<f64> {
        let cfg = &self.config;
        let (h, w) = (cfg.height, cfg.width);
        let channels = spec.modality.channels();
        let cells = cfg.cell_rows * cfg.cell_cols;

        let mut signature = identity_signature(self.dataset_seed, spec.id, cfg.signature_dim);
        let mut inst = stream(&[self.dataset_seed, TAG_INSTANCE, spec.noise_seed]);
        for s in &mut signature {
            *s += cfg.instance_sigma * inst.sample::<f64, _>(StandardNormal);
        }
        let intensity: Vec<Vec<f64>> = self.maps[spec.modality.index()]
            .iter()
            .map(|map| {
                map.chunks(cfg.signature_dim)
                    .map(|row| sigmoid(cfg.gain * row.iter().zip(&signature).map(|(a, s)| a * s).sum::<f64>()))
                    .collect()
            })
            .collect();
        debug_assert_eq!(intensity[0].len(), cells);

        let mut img = vec![0.0; channels * h * w];
        let mut clutter = ChaCha8Rng::seed_from_u64(spec.clutter_seed);
        let background: Vec<f64> = (0..channels).map(|_| clutter.random_range(0.1..0.4)).collect();
        for c in 0..channels {
            img[c * h * w..(c + 1) * h * w].fill(background[c]);
        }
        let rects = clutter.random_range(0..=cfg.max_rectangles);
        for _ in 0..rects {
            let rh = clutter.random_range(3..=h / 3);
            let rw = clutter.random_range(2..=w / 2);
            let y0 = clutter.random_range(0..=h - rh);
            let x0 = clutter.random_range(0..=w - rw);
            for c in 0..channels {
                let v = clutter.random_range(0.0..1.0);
                for y in y0..y0 + rh {
                    img[(c * h + y) * w + x0..(c * h + y) * w + x0 + rw].fill(v);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if let Some((r, col)) = self.body_mask(y, x, spec.dy, spec.dx) {
                    let cell = r * cfg.cell_cols + col;
                    for c in 0..channels {
                        img[(c * h + y) * w + x] = intensity[c][cell];
                    }
                }
            }
        }
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("non-negative sigma");
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(spec.noise_seed));
        for v in &mut img {
            *v = (*v + noise.sample(&mut noise_rng)).clamp(0.0, 1.0);
        }
        img
    }
}

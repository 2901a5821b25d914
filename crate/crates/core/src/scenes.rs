//! Synthetic oriented-rectangle scenes, proposal synthesis and RoI tokens.
//!
//! Scenes are grayscale with uniform-noise background and filled rotated
//! rectangles whose intensity band encodes the class. Proposals stand in for
//! an RPN: each ground truth gets a jittered copy of its axis-aligned hull,
//! plus a few background boxes that barely touch any object.

use std::f64::consts::FRAC_PI_3;
use std::io::{BufRead, Write};

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    decode_delta, encode_delta, intersection_area, rotated_iou, BoxDelta, HorizontalBox,
    OrientedBox, Point,
};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "stdet-dataset";
pub const DATASET_VERSION: u32 = 1;

/// RoI crops are resampled to this side before splitting into patches.
pub const ROI_SIZE: usize = 28;
pub const PATCH: usize = 4;
pub const TOKEN_GRID: usize = ROI_SIZE / PATCH;
pub const TOKEN_DIM: usize = PATCH * PATCH;

const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Range of the longer side, pixels.
    pub long_side: (f64, f64),
    /// Range of long/short side ratio.
    pub aspect: (f64, f64),
    /// Rotation range, radians; the longer side is always `w`.
    pub angle: (f64, f64),
    /// Background noise is uniform in `[0, noise]`.
    pub noise: f64,
    /// Foreground intensities span `[fg_low, 1]`, split into one band per class.
    pub fg_low: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_objects: 1,
            max_objects: 3,
            num_classes: 3,
            long_side: (24.0, 52.0),
            aspect: (1.5, 3.0),
            angle: (-FRAC_PI_3, FRAC_PI_3),
            noise: 0.25,
            fg_low: 0.35,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 8
            && self.height >= 8
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.num_classes >= 1
            && 0.0 < self.long_side.0
            && self.long_side.0 <= self.long_side.1
            && self.long_side.1 < self.width.min(self.height) as f64
            && 1.0 <= self.aspect.0
            && self.aspect.0 <= self.aspect.1
            && self.angle.0 <= self.angle.1
            && (0.0..1.0).contains(&self.noise)
            && self.noise < self.fg_low
            && self.fg_low < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene config {self:?}")))
        }
    }

    /// Intensity band `[lo, hi]` of a class.
    pub fn band(&self, class: usize) -> (f64, f64) {
        let span = (1.0 - self.fg_low) / self.num_classes as f64;
        let lo = self.fg_low + span * class as f64;
        (lo, lo + 0.7 * span)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Centre jitter as a fraction of the hull size.
    pub center_jitter: f64,
    pub scale: (f64, f64),
    pub backgrounds: usize,
    pub background_max_iou: f64,
    pub background_side: (f64, f64),
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            center_jitter: 0.15,
            scale: (0.8, 1.25),
            backgrounds: 1,
            background_max_iou: 0.3,
            background_side: (12.0, 56.0),
        }
    }
}

impl ProposalConfig {
    pub fn exact() -> Self {
        Self {
            center_jitter: 0.0,
            scale: (1.0, 1.0),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: OrientedBox,
    pub class: usize,
}

/// Grayscale scene with 8-bit pixels; intensity is `pixel / 255`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    #[serde(with = "base64_bytes")]
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    pub fn intensity(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col] as f64 / 255.0
    }

    pub fn image(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub delta: BoxDelta,
    pub class: usize,
    pub gt: OrientedBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalSample {
    pub proposal: HorizontalBox,
    /// `None` marks a background proposal.
    pub target: Option<Target>,
}

mod base64_bytes {
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn inside_image(b: &OrientedBox, w: usize, h: usize) -> bool {
    b.corners()
        .iter()
        .all(|p| p.x >= 1.0 && p.y >= 1.0 && p.x <= w as f64 - 1.0 && p.y <= h as f64 - 1.0)
}

/// Deterministic per-index seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    'objects: for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let class = rng.gen_range(0..cfg.num_classes);
            let long = rng.gen_range(cfg.long_side.0..=cfg.long_side.1);
            let short = long / rng.gen_range(cfg.aspect.0..=cfg.aspect.1);
            let alpha = rng.gen_range(cfg.angle.0..=cfg.angle.1);
            let x = rng.gen_range(0.0..cfg.width as f64);
            let y = rng.gen_range(0.0..cfg.height as f64);
            let bbox = OrientedBox::new(x, y, long, short, alpha)?;
            if !inside_image(&bbox, cfg.width, cfg.height) {
                continue;
            }
            if annotations
                .iter()
                .any(|a| intersection_area(&a.bbox, &bbox) > 0.0)
            {
                continue;
            }
            annotations.push(Annotation { bbox, class });
            continue 'objects;
        }
        break;
    }
    if annotations.is_empty() {
        return Err(Error::Config(
            "could not place any object; boxes too large for the image".into(),
        ));
    }

    let mut pixels = Vec::with_capacity(cfg.width * cfg.height);
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let c = Point::new(col as f64 + 0.5, row as f64 + 0.5);
            let v = match annotations.iter().find(|a| a.bbox.contains(c)) {
                Some(a) => {
                    let (lo, hi) = cfg.band(a.class);
                    rng.gen_range(lo..=hi)
                }
                None => rng.gen_range(0.0..=cfg.noise),
            };
            pixels.push(quantize(v));
        }
    }
    Ok(Scene {
        width: cfg.width,
        height: cfg.height,
        pixels,
        annotations,
    })
}

fn clip_to_image(x0: f64, y0: f64, x1: f64, y1: f64, w: usize, h: usize) -> Option<HorizontalBox> {
    let (x0, x1) = (x0.max(0.0), x1.min(w as f64));
    let (y0, y1) = (y0.max(0.0), y1.min(h as f64));
    if x1 - x0 < 2.0 || y1 - y0 < 2.0 {
        return None;
    }
    Some(HorizontalBox {
        x: (x0 + x1) / 2.0,
        y: (y0 + y1) / 2.0,
        w: x1 - x0,
        h: y1 - y0,
    })
}

pub fn make_proposals(
    scene: &Scene,
    cfg: &ProposalConfig,
    seed: u64,
) -> Result<Vec<ProposalSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for ann in &scene.annotations {
        let hull = ann.bbox.hull();
        let mut jitter = |range: f64| {
            if range > 0.0 {
                rng.gen_range(-range..=range)
            } else {
                0.0
            }
        };
        let cx = hull.x + jitter(cfg.center_jitter) * hull.w;
        let cy = hull.y + jitter(cfg.center_jitter) * hull.h;
        let mut scale = || {
            if cfg.scale.0 < cfg.scale.1 {
                rng.gen_range(cfg.scale.0..=cfg.scale.1)
            } else {
                cfg.scale.0
            }
        };
        let (w, h) = (hull.w * scale(), hull.h * scale());
        let Some(proposal) = clip_to_image(
            cx - w / 2.0,
            cy - h / 2.0,
            cx + w / 2.0,
            cy + h / 2.0,
            scene.width,
            scene.height,
        ) else {
            continue;
        };
        let delta = encode_delta(&proposal, &ann.bbox)?;
        out.push(ProposalSample {
            proposal,
            target: Some(Target {
                delta,
                class: ann.class,
                gt: ann.bbox,
            }),
        });
    }
    for _ in 0..cfg.backgrounds {
        for _ in 0..PLACEMENT_TRIES {
            let (lo, hi) = cfg.background_side;
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let x = rng.gen_range(w / 2.0..=scene.width as f64 - w / 2.0);
            let y = rng.gen_range(h / 2.0..=scene.height as f64 - h / 2.0);
            let proposal = HorizontalBox::new(x, y, w, h)?;
            let ob = proposal.to_oriented();
            if scene
                .annotations
                .iter()
                .all(|a| rotated_iou(&a.bbox, &ob) < cfg.background_max_iou)
            {
                out.push(ProposalSample {
                    proposal,
                    target: None,
                });
                break;
            }
        }
    }
    Ok(out)
}

fn bilinear(scene: &Scene, x: f64, y: f64) -> f64 {
    // pixel (r, c) is centred at (c + 0.5, r + 0.5)
    let fx = (x - 0.5).clamp(0.0, (scene.width - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (scene.height - 1) as f64);
    let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
    let (c1, r1) = (
        (c0 + 1).min(scene.width - 1),
        (r0 + 1).min(scene.height - 1),
    );
    let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
    let top = scene.intensity(r0, c0) * (1.0 - tx) + scene.intensity(r0, c1) * tx;
    let bottom = scene.intensity(r1, c0) * (1.0 - tx) + scene.intensity(r1, c1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Resamples the proposal to 28×28 and cuts 7×7 patches of 4×4 pixels.
///
/// Token `r·7 + c` holds patch row `r`, column `c`, flattened row-major.
pub fn extract_roi_tokens(scene: &Scene, proposal: &HorizontalBox) -> Result<Tensor> {
    if !(proposal.w > 0.0 && proposal.h > 0.0 && proposal.w.is_finite() && proposal.h.is_finite()) {
        return Err(Error::InvalidBox(format!(
            "degenerate proposal {proposal:?}"
        )));
    }
    let x0 = proposal.x - proposal.w / 2.0;
    let y0 = proposal.y - proposal.h / 2.0;
    let sx = proposal.w / ROI_SIZE as f64;
    let sy = proposal.h / ROI_SIZE as f64;
    let mut data = vec![0.0; TOKEN_GRID * TOKEN_GRID * TOKEN_DIM];
    for r in 0..ROI_SIZE {
        let y = y0 + (r as f64 + 0.5) * sy;
        for c in 0..ROI_SIZE {
            let x = x0 + (c as f64 + 0.5) * sx;
            let token = (r / PATCH) * TOKEN_GRID + c / PATCH;
            let slot = (r % PATCH) * PATCH + c % PATCH;
            data[token * TOKEN_DIM + slot] = bilinear(scene, x, y);
        }
    }
    Tensor::new(&[TOKEN_GRID * TOKEN_GRID, TOKEN_DIM], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: Scene,
    pub proposals: Vec<ProposalSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub scene_config: SceneConfig,
    pub proposal_config: ProposalConfig,
    pub scenes: Vec<SceneRecord>,
}

/// One training/evaluation example with its tokens extracted.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: usize,
    pub tokens: Tensor,
    pub proposal: HorizontalBox,
    pub target: Option<Target>,
}

impl Dataset {
    pub fn generate(
        seed: u64,
        scenes: usize,
        scene_config: SceneConfig,
        proposal_config: ProposalConfig,
    ) -> Result<Self> {
        let records = (0..scenes as u64)
            .map(|i| {
                let scene = generate_scene(derive_seed(seed, 2 * i), &scene_config)?;
                let proposals =
                    make_proposals(&scene, &proposal_config, derive_seed(seed, 2 * i + 1))?;
                Ok(SceneRecord { scene, proposals })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed,
            scene_config,
            proposal_config,
            scenes: records,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.scene_config.num_classes
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let ds: Dataset = serde_json::from_reader(input)?;
        if ds.format != DATASET_FORMAT {
            return Err(Error::Format(format!(
                "not a dataset file (format `{}`)",
                ds.format
            )));
        }
        if ds.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                ds.version
            )));
        }
        for rec in &ds.scenes {
            let s = &rec.scene;
            if s.pixels.len() != s.width * s.height {
                return Err(Error::Format(
                    "image size does not match its dimensions".into(),
                ));
            }
        }
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }

    /// Every proposal with its tokens, in scene order.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for (i, rec) in self.scenes.iter().enumerate() {
            for p in &rec.proposals {
                out.push(Sample {
                    scene: i,
                    tokens: extract_roi_tokens(&rec.scene, &p.proposal)?,
                    proposal: p.proposal,
                    target: p.target,
                });
            }
        }
        Ok(out)
    }

    /// Checks that every positive target decodes back onto its stored box.
    pub fn verify_targets(&self, tol: f64) -> Result<()> {
        for rec in &self.scenes {
            for p in &rec.proposals {
                if let Some(t) = &p.target {
                    let b = decode_delta(&p.proposal, &t.delta)?;
                    let err = [
                        b.x - t.gt.x,
                        b.y - t.gt.y,
                        b.w - t.gt.w,
                        b.h - t.gt.h,
                        b.alpha - t.gt.alpha,
                    ]
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                    if err > tol {
                        return Err(Error::Format(format!(
                            "target does not decode to its box (err {err})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Convenience for tests and the CLI.
pub fn encode_image_base64(scene: &Scene) -> String {
    base64::engine::general_purpose::STANDARD.encode(&scene.pixels)
}

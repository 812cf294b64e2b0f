//! Synthetic moving-shapes video generator.
//!
//! Two "motion-coded" classes are rendered with identical appearance — each
//! A-instance is paired with a B-instance sharing the same kind, size and
//! color — and differ only in motion direction (A drifts right, B drifts
//! left, toroidal wrap). A single frame therefore carries no information
//! about which of the two classes a shape pixel belongs to; the best any
//! frame-independent classifier can do on those pixels is the class prior.
//! That prior is computed from the generated pixel counts and stored next to
//! the dataset as its ambiguity bound.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pnm;
use super::{FrameRecord, LabelMap, SequenceManifest};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames_per_sequence: usize,
    pub sequences_train: usize,
    pub sequences_val: usize,
    pub sequences_test: usize,
    pub n_cl: usize,
    /// Shape edge length / diameter range in pixels, inclusive.
    pub shape_min: usize,
    pub shape_max: usize,
    /// Horizontal drift in px/frame; class A moves +x, class B −x.
    pub speed: f64,
    pub class_a: u8,
    pub class_b: u8,
    pub background_class: u8,
    pub shapes_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::motion_preset(0)
    }
}

impl SynthSpec {
    /// The default moving-shapes benchmark. The test split is deliberately
    /// large: a frame-independent model can only coin-flip the coded pair,
    /// and its measured accuracy should concentrate near the prior.
    pub fn motion_preset(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            height: 64,
            width: 64,
            frames_per_sequence: 8,
            sequences_train: 40,
            sequences_val: 6,
            sequences_test: 40,
            n_cl: 3,
            shape_min: 20,
            shape_max: 28,
            speed: 3.0,
            class_a: 1,
            class_b: 2,
            background_class: 0,
            shapes_per_class: 1,
        }
    }

    /// Negative control: identical to the motion preset except nothing
    /// moves, so the two coded classes are indistinguishable even with
    /// temporal features.
    pub fn static_preset(seed: u64) -> SynthSpec {
        SynthSpec {
            speed: 0.0,
            ..SynthSpec::motion_preset(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cl < 3 {
            return Err(Error::Config(
                "synth spec needs n_cl >= 3 (background + coded pair)".into(),
            ));
        }
        let distinct = self.class_a != self.class_b
            && self.class_a != self.background_class
            && self.class_b != self.background_class;
        if !distinct {
            return Err(Error::Config("synth classes must be distinct".into()));
        }
        for c in [self.class_a, self.class_b, self.background_class] {
            if usize::from(c) >= self.n_cl {
                return Err(Error::Config(format!("synth class {c} >= n_cl {}", self.n_cl)));
            }
        }
        if self.shape_min == 0 || self.shape_min > self.shape_max {
            return Err(Error::Config("bad shape size range".into()));
        }
        if self.shapes_per_class == 0 {
            return Err(Error::Config("shapes_per_class must be >= 1".into()));
        }
        let bands = 2 * self.shapes_per_class;
        let band_h = self.height / bands;
        if self.shape_max > band_h || self.shape_max > self.width {
            return Err(Error::Config(format!(
                "shapes up to {}px cannot fit: {} bands of {}px in a {}x{} frame",
                self.shape_max, bands, band_h, self.height, self.width
            )));
        }
        if self.frames_per_sequence == 0 {
            return Err(Error::Config("frames_per_sequence must be >= 1".into()));
        }
        if self.speed < 0.0 || !self.speed.is_finite() {
            return Err(Error::Config("speed must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Rect,
    Disc,
}

#[derive(Debug, Clone)]
struct ShapeInst {
    kind: ShapeKind,
    class: u8,
    size: usize,
    color: [u8; 3],
    x0: f64,
    y_center: usize,
    vx: f64,
}

/// Stored alongside a generated dataset: the per-pixel accuracy any
/// frame-independent classifier can reach on pixels of the coded pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BayesBound {
    pub bound: f64,
    pub pixels_a: u64,
    pub pixels_b: u64,
    pub class_a: u8,
    pub class_b: u8,
    pub note: String,
}

fn render_frame(
    spec: &SynthSpec,
    background: &[u8],
    shapes: &[ShapeInst],
    t: usize,
) -> (pnm::Rgb8, LabelMap) {
    let (h, w) = (spec.height, spec.width);
    let mut pixels = vec![0u8; 3 * h * w];
    for (i, px) in background.iter().enumerate() {
        pixels[3 * i] = *px;
        pixels[3 * i + 1] = *px;
        pixels[3 * i + 2] = *px;
    }
    let mut labels = LabelMap::filled(h, w, spec.background_class);

    for sh in shapes {
        let cx = (sh.x0 + sh.vx * t as f64).rem_euclid(w as f64).floor() as i64;
        let cy = sh.y_center as i64;
        let size = sh.size as i64;
        let lo = -(size / 2);
        let hi = size - 1 - size / 2;
        let r = sh.size as f64 / 2.0;
        for dy in lo..=hi {
            let py = cy + dy;
            if py < 0 || py >= h as i64 {
                continue;
            }
            for dx in lo..=hi {
                if sh.kind == ShapeKind::Disc {
                    let fx = dx as f64 + 0.5 * ((size + 1) % 2) as f64;
                    let fy = dy as f64 + 0.5 * ((size + 1) % 2) as f64;
                    if fx * fx + fy * fy > r * r {
                        continue;
                    }
                }
                let px = (cx + dx).rem_euclid(w as i64) as usize;
                let idx = py as usize * w + px;
                pixels[3 * idx] = sh.color[0];
                pixels[3 * idx + 1] = sh.color[1];
                pixels[3 * idx + 2] = sh.color[2];
                labels.set(py as usize, px, sh.class);
            }
        }
    }
    (
        pnm::Rgb8 {
            width: w,
            height: h,
            pixels,
        },
        labels,
    )
}

fn make_sequence_shapes(spec: &SynthSpec, stream: &mut Stream) -> Vec<ShapeInst> {
    let bands = 2 * spec.shapes_per_class;
    let band_h = spec.height / bands;
    // assign each class one band per pair slot, coin-flipped so vertical
    // position carries no class information
    let mut shapes = Vec::with_capacity(bands);
    for slot in 0..spec.shapes_per_class {
        // one appearance draw shared by the paired A and B instances
        let kind = if stream.coin() {
            ShapeKind::Rect
        } else {
            ShapeKind::Disc
        };
        let size = stream.range_inclusive(spec.shape_min, spec.shape_max);
        let color = [
            (140 + stream.below(116)) as u8,
            (140 + stream.below(116)) as u8,
            (140 + stream.below(116)) as u8,
        ];
        let band_a = 2 * slot + usize::from(stream.coin());
        let band_b = 2 * slot + (1 - (band_a - 2 * slot));
        for (class, band, vx) in [
            (spec.class_a, band_a, spec.speed),
            (spec.class_b, band_b, -spec.speed),
        ] {
            let y_center = band * band_h + band_h / 2;
            shapes.push(ShapeInst {
                kind,
                class,
                size,
                color,
                x0: stream.uniform(0.0, spec.width as f64),
                y_center,
                vx,
            });
        }
    }
    // z-order irrelevant: bands cannot overlap, but shuffle anyway so any
    // future overlap has no class-correlated occlusion
    stream.shuffle(&mut shapes);
    shapes
}

fn generate_split(
    spec: &SynthSpec,
    out: &Path,
    split: &str,
    count: usize,
    pix_a: &mut u64,
    pix_b: &mut u64,
) -> Result<()> {
    let split_dir = out.join(split);
    std::fs::create_dir_all(&split_dir)?;
    for si in 0..count {
        let sdir = split_dir.join(format!("seq_{si:03}"));
        std::fs::create_dir_all(&sdir)?;
        let mut stream = Stream::named(spec.seed, &format!("synth/{split}/{si}"));
        let background: Vec<u8> = (0..spec.height * spec.width)
            .map(|_| stream.below(60) as u8)
            .collect();
        let shapes = make_sequence_shapes(spec, &mut stream);

        let mut frames = Vec::with_capacity(spec.frames_per_sequence);
        for t in 0..spec.frames_per_sequence {
            let (img, labels) = render_frame(spec, &background, &shapes, t);
            for &l in labels.data() {
                if l == spec.class_a {
                    *pix_a += 1;
                } else if l == spec.class_b {
                    *pix_b += 1;
                }
            }
            let img_name = format!("f{t:04}.ppm");
            let lab_name = format!("f{t:04}.pgm");
            pnm::write_ppm(&sdir.join(&img_name), &img)?;
            labels.save_pgm(&sdir.join(&lab_name))?;
            frames.push(FrameRecord {
                n: t as u64,
                img: img_name,
                label: Some(lab_name),
                depth: None,
            });
        }
        SequenceManifest {
            id: format!("{split}_{si:03}"),
            n_cl: spec.n_cl,
            stride_k: 1,
            frames,
        }
        .save(&sdir.join("manifest.json"))?;
    }
    Ok(())
}

/// Generate the dataset under `out`: train/val/test splits, every frame
/// labeled (stride 1), plus `bayes_bound.json` and an echo of the spec.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<BayesBound> {
    spec.validate()?;
    std::fs::create_dir_all(out)?;
    let (mut pix_a, mut pix_b) = (0u64, 0u64);
    generate_split(spec, out, "train", spec.sequences_train, &mut pix_a, &mut pix_b)?;
    generate_split(spec, out, "val", spec.sequences_val, &mut pix_a, &mut pix_b)?;
    generate_split(spec, out, "test", spec.sequences_test, &mut pix_a, &mut pix_b)?;

    // Paired instances share appearance and position distributions, so a
    // frame-independent classifier's posterior over {A, B} equals the pixel
    // prior; its best accuracy on coded pixels is max of the priors.
    let total = pix_a + pix_b;
    let bound = if total == 0 {
        0.0
    } else {
        pix_a.max(pix_b) as f64 / total as f64
    };
    let bb = BayesBound {
        bound,
        pixels_a: pix_a,
        pixels_b: pix_b,
        class_a: spec.class_a,
        class_b: spec.class_b,
        note: "best per-pixel accuracy on coded-pair pixels achievable from a single frame; \
               the pair is rendered with identical appearance, so only the class prior is informative"
            .into(),
    };
    std::fs::write(out.join("bayes_bound.json"), serde_json::to_string_pretty(&bb)?)?;
    std::fs::write(out.join("synth_spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(bb)
}

pub fn load_bayes_bound(dataset_dir: &Path) -> Result<BayesBound> {
    let text = std::fs::read_to_string(dataset_dir.join("bayes_bound.json"))?;
    Ok(serde_json::from_str(&text)?)
}

//! Dataset layer: label maps, the on-disk sequence format (PPM/PGM frames
//! plus a JSON manifest), annotation-stride windowing, and the synthetic
//! motion dataset generator.

pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default sentinel for pixels excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// H×W map of class ids in {0..n_cl−1} ∪ {ignore_label}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, v: u8) -> LabelMap {
        LabelMap {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> LabelMap {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        LabelMap {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(Error::shape("label map", &[height * width], &[data.len()]));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        pnm::write_pgm(
            path,
            &pnm::Gray8 {
                width: self.width,
                height: self.height,
                pixels: self.data.clone(),
            },
        )
    }

    pub fn load_pgm(path: &Path) -> Result<LabelMap> {
        let g = pnm::read_pgm(path)?;
        LabelMap::from_vec(g.height, g.width, g.pixels)
    }
}

/// One frame entry of a sequence manifest. Paths are relative to the
/// manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub n: u64,
    pub img: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub depth: Option<String>,
}

/// JSON manifest describing one video sequence with labels every k-th frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub id: String,
    pub n_cl: usize,
    pub stride_k: u64,
    pub frames: Vec<FrameRecord>,
}

impl SequenceManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_cl == 0 || self.n_cl > 254 {
            return Err(Error::Data(format!(
                "manifest {}: n_cl {} out of range",
                self.id, self.n_cl
            )));
        }
        if self.stride_k == 0 {
            return Err(Error::Data(format!("manifest {}: stride_k 0", self.id)));
        }
        let mut prev: Option<u64> = None;
        for f in &self.frames {
            if let Some(p) = prev {
                if f.n <= p {
                    return Err(Error::Data(format!(
                        "manifest {}: frame numbers not strictly increasing ({p} then {})",
                        self.id, f.n
                    )));
                }
            }
            if f.label.is_some() && f.n % self.stride_k != 0 {
                return Err(Error::Data(format!(
                    "manifest {}: labeled frame {} not on stride {}",
                    self.id, f.n, self.stride_k
                )));
            }
            prev = Some(f.n);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SequenceManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: SequenceManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A fully loaded sequence: frames as C×H×W tensors in [0,1], labels where
/// present.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub id: String,
    pub n_cl: usize,
    pub stride_k: u64,
    pub frame_numbers: Vec<u64>,
    pub frames: Vec<Tensor>,
    pub labels: Vec<Option<LabelMap>>,
}

/// Convert an 8-bit RGB frame (and optional 16-bit depth) to a C×H×W tensor
/// scaled to [0,1]. Depth becomes a 4th channel.
pub fn frame_to_tensor(img: &pnm::Rgb8, depth: Option<&pnm::Gray16>) -> Result<Tensor> {
    let (h, w) = (img.height, img.width);
    let channels = if depth.is_some() { 4 } else { 3 };
    let mut t = Tensor::zeros(&[channels, h, w]);
    {
        let d = t.data_mut();
        let plane = h * w;
        for i in 0..plane {
            d[i] = f64::from(img.pixels[3 * i]) / 255.0;
            d[plane + i] = f64::from(img.pixels[3 * i + 1]) / 255.0;
            d[2 * plane + i] = f64::from(img.pixels[3 * i + 2]) / 255.0;
        }
        if let Some(dep) = depth {
            if dep.height != h || dep.width != w {
                return Err(Error::shape("depth map", &[h, w], &[dep.height, dep.width]));
            }
            for i in 0..plane {
                d[3 * plane + i] = f64::from(dep.pixels[i]) / 65535.0;
            }
        }
    }
    Ok(t)
}

/// Load every frame and label of a sequence described by `manifest_path`.
pub fn load_sequence(manifest_path: &Path) -> Result<LoadedSequence> {
    let manifest = SequenceManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut labels = Vec::with_capacity(manifest.frames.len());
    let mut frame_numbers = Vec::with_capacity(manifest.frames.len());
    let mut dims: Option<(usize, usize)> = None;
    for rec in &manifest.frames {
        let img = pnm::read_ppm(&dir.join(&rec.img))?;
        let depth = match &rec.depth {
            Some(p) => Some(pnm::read_pgm16(&dir.join(p))?),
            None => None,
        };
        let t = frame_to_tensor(&img, depth.as_ref())?;
        match dims {
            None => dims = Some((img.height, img.width)),
            Some((h, w)) => {
                if (img.height, img.width) != (h, w) {
                    return Err(Error::Data(format!(
                        "sequence {}: frame {} has size {}x{}, expected {}x{}",
                        manifest.id, rec.n, img.height, img.width, h, w
                    )));
                }
            }
        }
        let label = match &rec.label {
            Some(p) => {
                let lm = LabelMap::load_pgm(&dir.join(p))?;
                if lm.height() != img.height || lm.width() != img.width {
                    return Err(Error::Data(format!(
                        "sequence {}: label for frame {} is {}x{}, frame is {}x{}",
                        manifest.id,
                        rec.n,
                        lm.height(),
                        lm.width(),
                        img.height,
                        img.width
                    )));
                }
                Some(lm)
            }
            None => None,
        };
        frames.push(t);
        labels.push(label);
        frame_numbers.push(rec.n);
    }
    Ok(LoadedSequence {
        id: manifest.id,
        n_cl: manifest.n_cl,
        stride_k: manifest.stride_k,
        frame_numbers,
        frames,
        labels,
    })
}

/// A dataset is a directory of `seq_*` subdirectories, each holding a
/// `manifest.json`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n_cl: usize,
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub sequences: Vec<LoadedSequence>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut seq_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read dataset dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.json").is_file())
        .collect();
    seq_dirs.sort();
    if seq_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no sequence directories with manifest.json under {}",
            dir.display()
        )));
    }
    let mut sequences = Vec::with_capacity(seq_dirs.len());
    for d in &seq_dirs {
        sequences.push(load_sequence(&d.join("manifest.json"))?);
    }
    let n_cl = sequences[0].n_cl;
    let shape0 = sequences[0].frames[0].shape().to_vec();
    for s in &sequences {
        if s.n_cl != n_cl {
            return Err(Error::Data(format!(
                "sequence {} has n_cl {}, dataset has {}",
                s.id, s.n_cl, n_cl
            )));
        }
        for f in &s.frames {
            if f.shape() != shape0.as_slice() {
                return Err(Error::Data(format!(
                    "sequence {}: inconsistent frame shape {:?} vs {:?}",
                    s.id,
                    f.shape(),
                    shape0
                )));
            }
        }
    }
    Ok(Dataset {
        n_cl,
        input_channels: shape0[0],
        height: shape0[1],
        width: shape0[2],
        sequences,
    })
}

/// How training windows are assembled from a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowRule {
    /// T consecutive labeled frames, successive raw frame numbers exactly
    /// stride_k apart.
    LabeledOnly,
    /// T consecutive raw frames ending at a labeled frame.
    Dense,
}

/// Indices (into `LoadedSequence::frames`) of one training/eval window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataWindow {
    pub seq: usize,
    pub frame_idx: Vec<usize>,
}

/// The windows of a dataset under `rule`, plus the ids of sequences skipped
/// for being shorter than T.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub windows: Vec<DataWindow>,
    pub skipped: Vec<String>,
}

pub fn windows(dataset: &Dataset, t: usize, rule: WindowRule) -> Result<WindowPlan> {
    if t < 1 {
        return Err(Error::Config("window length T must be >= 1".into()));
    }
    let mut plan = WindowPlan {
        windows: Vec::new(),
        skipped: Vec::new(),
    };
    for (si, seq) in dataset.sequences.iter().enumerate() {
        let before = plan.windows.len();
        match rule {
            WindowRule::LabeledOnly => {
                let labeled: Vec<usize> = (0..seq.frames.len())
                    .filter(|&i| seq.labels[i].is_some())
                    .collect();
                if labeled.len() >= t {
                    for start in 0..=(labeled.len() - t) {
                        let idx: Vec<usize> = labeled[start..start + t].to_vec();
                        let spaced_by_k = idx.windows(2).all(|p| {
                            seq.frame_numbers[p[1]] - seq.frame_numbers[p[0]] == seq.stride_k
                        });
                        if spaced_by_k {
                            plan.windows.push(DataWindow {
                                seq: si,
                                frame_idx: idx,
                            });
                        }
                    }
                }
            }
            WindowRule::Dense => {
                if seq.frames.len() >= t {
                    for end in (t - 1)..seq.frames.len() {
                        if seq.labels[end].is_some() {
                            let consecutive = (1..t).all(|j| {
                                seq.frame_numbers[end + 1 + j - t]
                                    == seq.frame_numbers[end + j - t] + 1
                            });
                            if consecutive {
                                plan.windows.push(DataWindow {
                                    seq: si,
                                    frame_idx: (end + 1 - t..=end).collect(),
                                });
                            }
                        }
                    }
                }
            }
        }
        if plan.windows.len() == before {
            plan.skipped.push(seq.id.clone());
        }
    }
    Ok(plan)
}

/// Stack the window's frames into a T×C×H×W tensor and collect its labels.
pub fn assemble_window<'d>(
    dataset: &'d Dataset,
    win: &DataWindow,
) -> (Tensor, Vec<Option<&'d LabelMap>>) {
    let seq = &dataset.sequences[win.seq];
    let t = win.frame_idx.len();
    let (c, h, w) = (dataset.input_channels, dataset.height, dataset.width);
    let mut out = Tensor::zeros(&[t, c, h, w]);
    let frame_len = c * h * w;
    for (slot, &fi) in win.frame_idx.iter().enumerate() {
        out.data_mut()[slot * frame_len..(slot + 1) * frame_len]
            .copy_from_slice(seq.frames[fi].data());
    }
    let labels = win
        .frame_idx
        .iter()
        .map(|&fi| seq.labels[fi].as_ref())
        .collect();
    (out, labels)
}

//! Spatio-temporal module: one LSTM per region of the deepest feature maps.
//!
//! A frame's encoder output is a W′×H′ grid of m-dimensional region
//! descriptors. Each grid location owns (or, in shared mode, borrows) an LSTM
//! that consumes its descriptor sequence over a window of frames and emits
//! the hidden state as the region's spatio-temporal descriptor. Cells never
//! exchange state across locations; all temporal mixing is per-region.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::lstm::{lstm_step, lstm_step_backward, LstmCache, LstmState, LstmWeights};
use crate::rng::Stream;
use crate::tensor::{ParamSet, Tensor};

/// W′×H′ map of m-dimensional region descriptors for one frame.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    /// Shape [maps, height, width].
    pub values: Tensor,
    /// Frame index within the window.
    pub t: usize,
}

impl FeatureGrid {
    pub fn new(values: Tensor, t: usize) -> Result<FeatureGrid> {
        let shp = values.shape();
        if shp.len() != 3 {
            return Err(Error::shape("feature grid", &[0, 0, 0], shp));
        }
        Ok(FeatureGrid {
            maps: shp[0],
            height: shp[1],
            width: shp[2],
            values,
            t,
        })
    }

    /// The m-vector at grid location (row, col).
    pub fn descriptor(&self, row: usize, col: usize) -> Tensor {
        let plane = self.height * self.width;
        let off = row * self.width + col;
        Tensor::from_fn(&[self.maps], |c| self.values.data()[c * plane + off])
    }

    pub fn set_descriptor(&mut self, row: usize, col: usize, v: &Tensor) {
        let plane = self.height * self.width;
        let off = row * self.width + col;
        for c in 0..self.maps {
            self.values.data_mut()[c * plane + off] = v.data()[c];
        }
    }
}

/// Weight layout of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One independent weight set per grid location.
    PerLocation,
    /// One weight set used at every location.
    Shared,
}

/// The grid of LSTMs plus its per-location running state.
#[derive(Debug, Clone)]
pub struct GridLstm {
    pub mode: WeightMode,
    pub width: usize,
    pub height: usize,
    pub input_maps: usize,
    pub hidden: usize,
    /// Window length T; in strict mode a longer sequence is an error.
    pub window: usize,
    pub strict: bool,
    weights: Vec<LstmWeights>,
    states: Vec<LstmState>,
}

/// Saved activations of one window forward pass: caches[t][location].
pub struct GridWindowCache {
    caches: Vec<Vec<LstmCache>>,
    width: usize,
    height: usize,
}

impl GridLstm {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        mode: WeightMode,
        width: usize,
        height: usize,
        input_maps: usize,
        hidden: usize,
        window: usize,
        stream: &mut Stream,
    ) -> GridLstm {
        let n_sets = match mode {
            WeightMode::Shared => 1,
            WeightMode::PerLocation => width * height,
        };
        let weights = (0..n_sets)
            .map(|i| {
                let name = match mode {
                    WeightMode::Shared => format!("{prefix}.cell"),
                    WeightMode::PerLocation => {
                        format!("{prefix}.cell_r{}c{}", i / width, i % width)
                    }
                };
                LstmWeights::register(params, &name, input_maps, hidden, stream)
            })
            .collect();
        let states = (0..width * height).map(|_| LstmState::zeros(hidden)).collect();
        GridLstm {
            mode,
            width,
            height,
            input_maps,
            hidden,
            window,
            strict: true,
            weights,
            states,
        }
    }

    pub fn weights_at(&self, row: usize, col: usize) -> &LstmWeights {
        match self.mode {
            WeightMode::Shared => &self.weights[0],
            WeightMode::PerLocation => &self.weights[row * self.width + col],
        }
    }

    pub fn weight_sets(&self) -> &[LstmWeights] {
        &self.weights
    }

    /// Zero every h and c and rewind the time index.
    pub fn reset(&mut self) {
        for s in &mut self.states {
            s.h.fill(0.0);
            s.c.fill(0.0);
            s.t = 0;
        }
    }

    /// Run the window through the grid, starting from the current states
    /// (call [`GridLstm::reset`] first for window-independent behavior).
    /// Returns one N-map grid per input frame plus the caches for backward.
    pub fn forward(
        &mut self,
        seq: &[FeatureGrid],
        params: &ParamSet,
    ) -> Result<(Vec<FeatureGrid>, GridWindowCache)> {
        if self.strict && seq.len() > self.window {
            return Err(Error::Sequence(format!(
                "window of {} frames exceeds configured T={}",
                seq.len(),
                self.window
            )));
        }
        for g in seq {
            if (g.maps, g.height, g.width) != (self.input_maps, self.height, self.width) {
                return Err(Error::Config(format!(
                    "feature grid {}x{}x{} does not match grid LSTM {}x{}x{}",
                    g.maps, g.height, g.width, self.input_maps, self.height, self.width
                )));
            }
        }
        let mut out = Vec::with_capacity(seq.len());
        let mut all_caches = Vec::with_capacity(seq.len());
        for g in seq {
            let mut og = FeatureGrid::new(
                Tensor::zeros(&[self.hidden, self.height, self.width]),
                g.t,
            )?;
            let mut step_caches = Vec::with_capacity(self.height * self.width);
            for row in 0..self.height {
                for col in 0..self.width {
                    let loc = row * self.width + col;
                    let x = g.descriptor(row, col);
                    let w = *self.weights_at(row, col);
                    let (next, cache) = lstm_step(&x, &self.states[loc], &w, params)?;
                    og.set_descriptor(row, col, &next.h);
                    self.states[loc] = next;
                    step_caches.push(cache);
                }
            }
            out.push(og);
            all_caches.push(step_caches);
        }
        Ok((
            out,
            GridWindowCache {
                caches: all_caches,
                width: self.width,
                height: self.height,
            },
        ))
    }

    /// Backpropagation through time across the window. `dout[t]` is the
    /// cotangent of the t-th output grid (shape [N, H′, W′]). Weight
    /// gradients accumulate into `params`; returns the cotangents of the
    /// input grids (shape [m, H′, W′] each). No gradient crosses the window
    /// boundary: the recurrent cotangent is dropped at t = 0.
    pub fn backward(
        &self,
        dout: &[Tensor],
        cache: &GridWindowCache,
        params: &mut ParamSet,
    ) -> Result<Vec<Tensor>> {
        if cache.caches.is_empty() {
            return Err(Error::Sequence(
                "grid backward called without a saved forward window".into(),
            ));
        }
        if dout.len() != cache.caches.len() {
            return Err(Error::Sequence(format!(
                "{} cotangent grids for a window of {} frames",
                dout.len(),
                cache.caches.len()
            )));
        }
        if cache.width != self.width || cache.height != self.height {
            return Err(Error::Sequence("cache does not belong to this grid".into()));
        }
        let t_len = dout.len();
        let plane = self.height * self.width;
        for d in dout {
            if d.shape() != [self.hidden, self.height, self.width] {
                return Err(Error::shape(
                    "grid backward cotangent",
                    &[self.hidden, self.height, self.width],
                    d.shape(),
                ));
            }
        }

        let mut dinputs =
            vec![Tensor::zeros(&[self.input_maps, self.height, self.width]); t_len];
        // running recurrent cotangents per location
        let mut dh = vec![Tensor::zeros(&[self.hidden]); plane];
        let mut dc = vec![Tensor::zeros(&[self.hidden]); plane];

        for t in (0..t_len).rev() {
            for row in 0..self.height {
                for col in 0..self.width {
                    let loc = row * self.width + col;
                    // add this step's output cotangent to the recurrent one
                    let fiber = Tensor::from_fn(&[self.hidden], |c| {
                        dout[t].data()[c * plane + loc]
                    });
                    dh[loc].add_assign(&fiber)?;
                    let w = *self.weights_at(row, col);
                    let (dx, dh_prev, dc_prev) =
                        lstm_step_backward(&dh[loc], &dc[loc], &cache.caches[t][loc], &w, params)?;
                    for c in 0..self.input_maps {
                        dinputs[t].data_mut()[c * plane + loc] = dx.data()[c];
                    }
                    dh[loc] = dh_prev;
                    dc[loc] = dc_prev;
                }
            }
        }
        Ok(dinputs)
    }

    // Checkpoint: magic, mode byte, five u64 dims, then weight blocks in
    // row-major location order (a single block in shared mode).
    const MAGIC: &'static [u8; 4] = b"STGL";

    pub fn write_checkpoint<W: Write>(&self, params: &ParamSet, out: &mut W) -> Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&[match self.mode {
            WeightMode::Shared => 0u8,
            WeightMode::PerLocation => 1u8,
        }])?;
        for v in [
            self.width as u64,
            self.height as u64,
            self.input_maps as u64,
            self.hidden as u64,
            self.window as u64,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for w in &self.weights {
            w.write_to(params, out)?;
        }
        Ok(())
    }

    /// Load a checkpoint previously written by a grid with identical
    /// configuration.
    pub fn read_checkpoint<R: Read>(&self, params: &mut ParamSet, input: &mut R) -> Result<()> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Data("bad grid checkpoint magic".into()));
        }
        let mut mode = [0u8; 1];
        input.read_exact(&mut mode)?;
        let expect_mode = match self.mode {
            WeightMode::Shared => 0u8,
            WeightMode::PerLocation => 1u8,
        };
        if mode[0] != expect_mode {
            return Err(Error::Data(format!(
                "grid checkpoint weight mode {} does not match configured {}",
                mode[0], expect_mode
            )));
        }
        let mut b8 = [0u8; 8];
        let mut dims = [0u64; 5];
        for d in &mut dims {
            input.read_exact(&mut b8)?;
            *d = u64::from_le_bytes(b8);
        }
        let expect = [
            self.width as u64,
            self.height as u64,
            self.input_maps as u64,
            self.hidden as u64,
            self.window as u64,
        ];
        if dims != expect {
            return Err(Error::Data(format!(
                "grid checkpoint dims {dims:?} do not match configured {expect:?}"
            )));
        }
        for w in &self.weights {
            w.read_into(params, input)?;
        }
        Ok(())
    }
}

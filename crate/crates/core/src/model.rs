//! Model assembly: a desk-scale spatio-temporal FCN.
//!
//! Topologies:
//!   off:     encoder → 1×1 classifier → deconv ×d → logits
//!   on_top:  encoder → grid LSTM (m→N) → 1×1 projection (N→m)
//!            → 1×1 classifier → deconv ×d → logits
//!   fusion:  encoder → [A: identity | B: strided conv ↓2 → grid LSTM
//!            → 1×1 projection → deconv ×2] → A+B → dilated conv block
//!            → 1×1 classifier → deconv ×d → logits
//!
//! The encoder is four 3×3 conv+ReLU blocks; the first log2(d) blocks use
//! stride 2, so the deepest maps form an (H/d)×(W/d) grid of region
//! descriptors. With the spatio-temporal stack off, the model is a plain
//! frame-independent FCN with identical parameter shapes everywhere else.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridLstm, GridWindowCache, WeightMode};
use crate::layers::{
    bilinear_kernel, conv2d, conv2d_backward_input, conv2d_backward_params, deconv2d,
    deconv2d_backward_input, deconv2d_backward_weights, relu, relu_backward, ConvSpec, DeconvSpec,
};
use crate::rng::Stream;
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Where the spatio-temporal module sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StMode {
    Off,
    OnTop,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// 3 for RGB, 4 for RGB-D (depth as an extra input channel).
    pub input_channels: usize,
    pub n_cl: usize,
    /// Output channels of the four encoder blocks; the last is the region
    /// descriptor size m.
    pub encoder_widths: Vec<usize>,
    /// Total downsampling d of the encoder (1, 2, 4 or 8); the feature grid
    /// is (H/d)×(W/d).
    pub downsample: usize,
    pub st_mode: StMode,
    pub grid_weights: WeightMode,
    /// LSTM hidden units N.
    pub hidden: usize,
    /// Window length T.
    pub window: usize,
    /// Learn the upsampling deconvolutions (bilinear-initialized either way).
    pub deconv_learned: bool,
    /// Carry LSTM state across windows instead of resetting.
    pub carry_state: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            n_cl: 3,
            encoder_widths: vec![8, 12, 16, 16],
            downsample: 8,
            st_mode: StMode::OnTop,
            grid_weights: WeightMode::PerLocation,
            hidden: 30,
            window: 3,
            deconv_learned: true,
            carry_state: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 3 && self.input_channels != 4 {
            return Err(Error::Config(format!(
                "input_channels must be 3 (RGB) or 4 (RGB-D), got {}",
                self.input_channels
            )));
        }
        if self.n_cl < 2 || self.n_cl > 254 {
            return Err(Error::Config(format!("n_cl {} out of range", self.n_cl)));
        }
        if self.encoder_widths.len() != 4 || self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "encoder_widths must be 4 positive widths, got {:?}",
                self.encoder_widths
            )));
        }
        if !matches!(self.downsample, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "downsample must be 1, 2, 4 or 8, got {}",
                self.downsample
            )));
        }
        if self.st_mode != StMode::Off && (self.hidden == 0 || self.window == 0) {
            return Err(Error::Config(
                "hidden units and window length must be positive with the ST module on".into(),
            ));
        }
        // the grid must be much coarser than the frame for per-region
        // descriptors to mean anything
        if self.st_mode != StMode::Off && self.downsample < 4 {
            return Err(Error::Config(format!(
                "the spatio-temporal grid needs downsample >= 4, got {}",
                self.downsample
            )));
        }
        Ok(())
    }

    /// Region descriptor size m (deepest encoder width).
    pub fn maps(&self) -> usize {
        *self.encoder_widths.last().unwrap()
    }
}

#[derive(Debug)]
struct ConvBlock {
    spec: ConvSpec,
    w: ParamId,
    b: ParamId,
    with_relu: bool,
}

struct ConvBlockCache {
    input: Tensor,
    pre_relu: Option<Tensor>,
}

impl ConvBlock {
    fn register(
        params: &mut ParamSet,
        name: &str,
        spec: ConvSpec,
        with_relu: bool,
        seed: u64,
    ) -> ConvBlock {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut stream = Stream::named(seed, &format!("init/{name}.w"));
        let w = params.register(
            format!("{name}.w"),
            Tensor::rand_uniform(&spec.weight_shape(), -bound, bound, &mut stream),
        );
        // biases drawn like the weights: a bias sitting exactly at a ReLU
        // kink would make finite-difference checks ill-defined
        let mut bstream = Stream::named(seed, &format!("init/{name}.b"));
        let b = params.register(
            format!("{name}.b"),
            Tensor::rand_uniform(&[spec.out_channels], -bound, bound, &mut bstream),
        );
        ConvBlock {
            spec,
            w,
            b,
            with_relu,
        }
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, ConvBlockCache)> {
        let pre = conv2d(x, &self.spec, params.value(self.w), Some(params.value(self.b)))?;
        if self.with_relu {
            let out = relu(&pre);
            Ok((
                out,
                ConvBlockCache {
                    input: x.clone(),
                    pre_relu: Some(pre),
                },
            ))
        } else {
            Ok((
                pre,
                ConvBlockCache {
                    input: x.clone(),
                    pre_relu: None,
                },
            ))
        }
    }

    fn backward(
        &self,
        params: &mut ParamSet,
        cache: &ConvBlockCache,
        dout: &Tensor,
    ) -> Result<Tensor> {
        let dpre = match &cache.pre_relu {
            Some(pre) => relu_backward(dout, pre)?,
            None => dout.clone(),
        };
        let (dw, db) = conv2d_backward_params(&dpre, &self.spec, &cache.input)?;
        params.accumulate(self.w, &dw)?;
        params.accumulate(self.b, &db)?;
        conv2d_backward_input(
            &dpre,
            &self.spec,
            params.value(self.w),
            cache.input.shape()[2],
            cache.input.shape()[3],
        )
    }
}

#[derive(Debug)]
struct DeconvLayer {
    spec: DeconvSpec,
    w: ParamId,
}

impl DeconvLayer {
    fn register(params: &mut ParamSet, name: &str, spec: DeconvSpec, learned: bool) -> DeconvLayer {
        let w = params.register(format!("{name}.w"), bilinear_kernel(spec.factor, spec.in_channels));
        params.get_mut(w).frozen = !learned;
        DeconvLayer { spec, w }
    }

    fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = deconv2d(x, &self.spec, params.value(self.w))?;
        Ok((out, x.clone()))
    }

    fn backward(&self, params: &mut ParamSet, input: &Tensor, dout: &Tensor) -> Result<Tensor> {
        let dw = deconv2d_backward_weights(dout, &self.spec, input)?;
        params.accumulate(self.w, &dw)?;
        deconv2d_backward_input(dout, &self.spec, params.value(self.w))
    }
}

#[derive(Debug)]
struct StStack {
    grid: GridLstm,
    proj: ConvBlock,
}

#[derive(Debug)]
struct FusionStack {
    down: ConvBlock,
    grid: GridLstm,
    proj: ConvBlock,
    up: DeconvLayer,
    context: ConvBlock,
}

/// The assembled network. One instance is owned by one training thread;
/// clone for read-only parallel inference.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    encoder: Vec<ConvBlock>,
    st: Option<StStack>,
    fusion: Option<FusionStack>,
    classifier: ConvBlock,
    out: DeconvLayer,
    /// Spatial extents the grid was sized for (fixed at build time).
    grid_extent: Option<(usize, usize)>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        // rebuild the wiring, then copy parameter values
        let mut m = build_for(&self.config, self.grid_extent).expect("clone of a valid model");
        for (dst, src) in m
            .params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(self.params.ids().collect::<Vec<_>>())
        {
            *m.params.get_mut(dst) = self.params.get(src).clone();
        }
        m
    }
}

/// Grid extents are fixed when the model is built, from the frame size the
/// model will be applied to. Models are built per dataset resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameExtent {
    pub height: usize,
    pub width: usize,
}

/// Build a model for `config` applied to frames of the given extent.
pub fn build(config: &ModelConfig, extent: FrameExtent) -> Result<Model> {
    config.validate()?;
    if extent.height % config.downsample != 0 || extent.width % config.downsample != 0 {
        return Err(Error::Config(format!(
            "downsample {} does not divide frame extent {}x{}",
            config.downsample, extent.height, extent.width
        )));
    }
    let grid_h = extent.height / config.downsample;
    let grid_w = extent.width / config.downsample;
    if config.st_mode == StMode::Fusion && (grid_h % 2 != 0 || grid_w % 2 != 0) {
        return Err(Error::Config(format!(
            "fusion needs an even feature grid, got {grid_h}x{grid_w}"
        )));
    }
    build_for(config, Some((grid_h, grid_w)))
}

/// Build the fusion variant (errors unless `st_mode` is `fusion`).
pub fn build_fusion(config: &ModelConfig, extent: FrameExtent) -> Result<Model> {
    if config.st_mode != StMode::Fusion {
        return Err(Error::Config(
            "build_fusion requires st_mode = fusion".into(),
        ));
    }
    build(config, extent)
}

fn build_for(config: &ModelConfig, grid_extent: Option<(usize, usize)>) -> Result<Model> {
    let mut params = ParamSet::new();
    let n_stride2 = config.downsample.trailing_zeros() as usize;
    let mut encoder = Vec::with_capacity(4);
    let mut cin = config.input_channels;
    for (i, &cout) in config.encoder_widths.iter().enumerate() {
        let stride = if i < n_stride2 { 2 } else { 1 };
        let spec = ConvSpec::new(cin, cout, 3).stride(stride).pad(1);
        encoder.push(ConvBlock::register(
            &mut params,
            &format!("enc{}", i + 1),
            spec,
            true,
            config.seed,
        ));
        cin = cout;
    }
    let m = config.maps();

    let (grid_h, grid_w) = grid_extent.unwrap_or((0, 0));
    let mut st = None;
    let mut fusion = None;
    match config.st_mode {
        StMode::Off => {}
        StMode::OnTop => {
            let mut stream = Stream::named(config.seed, "init/st");
            let grid = GridLstm::register(
                &mut params,
                "st",
                config.grid_weights,
                grid_w,
                grid_h,
                m,
                config.hidden,
                config.window,
                &mut stream,
            );
            let proj = ConvBlock::register(
                &mut params,
                "st_proj",
                ConvSpec::new(config.hidden, m, 1),
                false,
                config.seed,
            );
            st = Some(StStack { grid, proj });
        }
        StMode::Fusion => {
            let down = ConvBlock::register(
                &mut params,
                "fus_down",
                ConvSpec::new(m, m, 3).stride(2).pad(1),
                true,
                config.seed,
            );
            let mut stream = Stream::named(config.seed, "init/st");
            let grid = GridLstm::register(
                &mut params,
                "st",
                config.grid_weights,
                grid_w / 2,
                grid_h / 2,
                m,
                config.hidden,
                config.window,
                &mut stream,
            );
            let proj = ConvBlock::register(
                &mut params,
                "fus_proj",
                ConvSpec::new(config.hidden, m, 1),
                false,
                config.seed,
            );
            let up = DeconvLayer::register(
                &mut params,
                "fus_up",
                DeconvSpec::new(m, m, 2)?,
                config.deconv_learned,
            );
            let context = ConvBlock::register(
                &mut params,
                "fus_ctx",
                ConvSpec::new(m, m, 3).dilation(2).pad(2),
                true,
                config.seed,
            );
            fusion = Some(FusionStack {
                down,
                grid,
                proj,
                up,
                context,
            });
        }
    }

    let classifier = ConvBlock::register(
        &mut params,
        "cls",
        ConvSpec::new(m, config.n_cl, 1),
        false,
        config.seed,
    );
    let out = DeconvLayer::register(
        &mut params,
        "out",
        DeconvSpec::new(config.n_cl, config.n_cl, config.downsample)?,
        config.deconv_learned,
    );
    Ok(Model {
        config: config.clone(),
        params,
        encoder,
        st,
        fusion,
        classifier,
        out,
        grid_extent,
    })
}

/// Forward-pass bookkeeping handed to [`Model::backward_window`].
pub struct WindowForward {
    /// Per-frame logits, shape [T, n_cl, H, W].
    pub logits: Tensor,
    enc: Vec<ConvBlockCache>,
    st_grid: Option<GridWindowCache>,
    st_proj: Option<ConvBlockCache>,
    fus_down: Option<ConvBlockCache>,
    fus_proj: Option<ConvBlockCache>,
    fus_up_in: Option<Tensor>,
    fus_ctx: Option<ConvBlockCache>,
    cls: ConvBlockCache,
    out_in: Tensor,
}

fn batch_to_grids(batch: &Tensor) -> Result<Vec<FeatureGrid>> {
    let shp = batch.shape();
    let (t_len, c, h, w) = (shp[0], shp[1], shp[2], shp[3]);
    let frame_len = c * h * w;
    (0..t_len)
        .map(|t| {
            let data = batch.data()[t * frame_len..(t + 1) * frame_len].to_vec();
            FeatureGrid::new(Tensor::from_vec(&[c, h, w], data)?, t)
        })
        .collect()
}

fn grids_to_batch(grids: &[FeatureGrid]) -> Result<Tensor> {
    let (c, h, w) = (grids[0].maps, grids[0].height, grids[0].width);
    let frame_len = c * h * w;
    let mut out = Tensor::zeros(&[grids.len(), c, h, w]);
    for (t, g) in grids.iter().enumerate() {
        out.data_mut()[t * frame_len..(t + 1) * frame_len].copy_from_slice(g.values.data());
    }
    Ok(out)
}

fn batch_to_frame_tensors(batch: &Tensor) -> Vec<Tensor> {
    let shp = batch.shape();
    let (t_len, c, h, w) = (shp[0], shp[1], shp[2], shp[3]);
    let frame_len = c * h * w;
    (0..t_len)
        .map(|t| {
            Tensor::from_vec(
                &[c, h, w],
                batch.data()[t * frame_len..(t + 1) * frame_len].to_vec(),
            )
            .unwrap()
        })
        .collect()
}

fn frame_tensors_to_batch(frames: &[Tensor]) -> Tensor {
    let shp = frames[0].shape();
    let frame_len: usize = shp.iter().product();
    let mut out = Tensor::zeros(&[frames.len(), shp[0], shp[1], shp[2]]);
    for (t, f) in frames.iter().enumerate() {
        out.data_mut()[t * frame_len..(t + 1) * frame_len].copy_from_slice(f.data());
    }
    out
}

impl Model {
    /// Reset the recurrent state (no-op for a frame-independent model).
    pub fn reset_state(&mut self) {
        if let Some(st) = &mut self.st {
            st.grid.reset();
        }
        if let Some(f) = &mut self.fusion {
            f.grid.reset();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    /// Run a window of frames, shape [T, C, H, W], producing per-frame
    /// logits of the same spatial extent. With the ST module on, frames are
    /// consumed in order as one sequence; the recurrent state is reset first
    /// unless the model is configured to carry it.
    pub fn forward_window(&mut self, frames: &Tensor) -> Result<WindowForward> {
        let shp = frames.shape();
        if shp.len() != 4 {
            return Err(Error::shape("forward_window", &[0, 0, 0, 0], shp));
        }
        let (t_len, c, h, w) = (shp[0], shp[1], shp[2], shp[3]);
        if c != self.config.input_channels {
            return Err(Error::Config(format!(
                "model expects {} input channels, frames have {c}",
                self.config.input_channels
            )));
        }
        if h % self.config.downsample != 0 || w % self.config.downsample != 0 {
            return Err(Error::Config(format!(
                "downsample {} does not divide {h}x{w}",
                self.config.downsample
            )));
        }
        if let Some((gh, gw)) = self.grid_extent {
            if self.config.st_mode != StMode::Off
                && (h / self.config.downsample, w / self.config.downsample) != (gh, gw)
            {
                return Err(Error::Config(format!(
                    "model was built for a {gh}x{gw} grid, frames give {}x{}",
                    h / self.config.downsample,
                    w / self.config.downsample
                )));
            }
        }
        if self.config.st_mode != StMode::Off && t_len != self.config.window {
            return Err(Error::Sequence(format!(
                "window of {t_len} frames, model configured for T={}",
                self.config.window
            )));
        }

        // encoder over the whole window as a batch
        let mut x = frames.clone();
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (y, cache) = block.forward(&self.params, &x)?;
            enc_caches.push(cache);
            x = y;
        }
        let feat = x;

        let mut st_grid_cache = None;
        let mut st_proj_cache = None;
        let mut fus_down_cache = None;
        let mut fus_proj_cache = None;
        let mut fus_up_in = None;
        let mut fus_ctx_cache = None;

        let cls_in = match self.config.st_mode {
            StMode::Off => feat,
            StMode::OnTop => {
                let st = self.st.as_mut().expect("on_top model has an st stack");
                if !self.config.carry_state {
                    st.grid.reset();
                }
                let grids = batch_to_grids(&feat)?;
                let (out_grids, gcache) = st.grid.forward(&grids, &self.params)?;
                st_grid_cache = Some(gcache);
                let st_batch = grids_to_batch(&out_grids)?;
                let (proj, pcache) = st.proj.forward(&self.params, &st_batch)?;
                st_proj_cache = Some(pcache);
                proj
            }
            StMode::Fusion => {
                let fus = self.fusion.as_mut().expect("fusion model has a stack");
                if !self.config.carry_state {
                    fus.grid.reset();
                }
                let (down, dcache) = fus.down.forward(&self.params, &feat)?;
                fus_down_cache = Some(dcache);
                let grids = batch_to_grids(&down)?;
                let (out_grids, gcache) = fus.grid.forward(&grids, &self.params)?;
                st_grid_cache = Some(gcache);
                let st_batch = grids_to_batch(&out_grids)?;
                let (proj, pcache) = fus.proj.forward(&self.params, &st_batch)?;
                fus_proj_cache = Some(pcache);
                let (up, up_in) = fus.up.forward(&self.params, &proj)?;
                fus_up_in = Some(up_in);
                let fused = feat.add(&up)?;
                let (ctx, ccache) = fus.context.forward(&self.params, &fused)?;
                fus_ctx_cache = Some(ccache);
                ctx
            }
        };

        let (small, cls_cache) = self.classifier.forward(&self.params, &cls_in)?;
        let (logits, out_in) = self.out.forward(&self.params, &small)?;
        debug_assert_eq!(logits.shape(), &[t_len, self.config.n_cl, h, w]);
        Ok(WindowForward {
            logits,
            enc: enc_caches,
            st_grid: st_grid_cache,
            st_proj: st_proj_cache,
            fus_down: fus_down_cache,
            fus_proj: fus_proj_cache,
            fus_up_in,
            fus_ctx: fus_ctx_cache,
            cls: cls_cache,
            out_in,
        })
    }

    /// Backpropagate `dlogits` (shape [T, n_cl, H, W]) through the saved
    /// window. Parameter gradients accumulate into `self.params`; the return
    /// value is the cotangent of the input frames.
    pub fn backward_window(&mut self, fwd: &WindowForward, dlogits: &Tensor) -> Result<Tensor> {
        if dlogits.shape() != fwd.logits.shape() {
            return Err(Error::shape(
                "backward_window",
                fwd.logits.shape(),
                dlogits.shape(),
            ));
        }
        let d_small = self.out.backward(&mut self.params, &fwd.out_in, dlogits)?;
        let d_cls_in = self
            .classifier
            .backward(&mut self.params, &fwd.cls, &d_small)?;

        let d_feat = match self.config.st_mode {
            StMode::Off => d_cls_in,
            StMode::OnTop => {
                let st = self.st.as_ref().expect("on_top model has an st stack");
                let d_st_batch = st.proj.backward(
                    &mut self.params,
                    fwd.st_proj.as_ref().expect("saved projection cache"),
                    &d_cls_in,
                )?;
                let douts = batch_to_frame_tensors(&d_st_batch);
                let dinputs = st.grid.backward(
                    &douts,
                    fwd.st_grid.as_ref().expect("saved grid cache"),
                    &mut self.params,
                )?;
                frame_tensors_to_batch(&dinputs)
            }
            StMode::Fusion => {
                let fus = self.fusion.as_ref().expect("fusion model has a stack");
                let d_fused = fus.context.backward(
                    &mut self.params,
                    fwd.fus_ctx.as_ref().expect("saved context cache"),
                    &d_cls_in,
                )?;
                // elementwise fuse routes the cotangent to both branches
                let d_up = fus.up.backward(
                    &mut self.params,
                    fwd.fus_up_in.as_ref().expect("saved upsample input"),
                    &d_fused,
                )?;
                let d_st_batch = fus.proj.backward(
                    &mut self.params,
                    fwd.fus_proj.as_ref().expect("saved projection cache"),
                    &d_up,
                )?;
                let douts = batch_to_frame_tensors(&d_st_batch);
                let dinputs = fus.grid.backward(
                    &douts,
                    fwd.st_grid.as_ref().expect("saved grid cache"),
                    &mut self.params,
                )?;
                let d_down_out = frame_tensors_to_batch(&dinputs);
                let d_b = fus.down.backward(
                    &mut self.params,
                    fwd.fus_down.as_ref().expect("saved downsample cache"),
                    &d_down_out,
                )?;
                d_fused.add(&d_b)?
            }
        };

        let mut d = d_feat;
        for (block, cache) in self.encoder.iter().zip(&fwd.enc).rev() {
            d = block.backward(&mut self.params, cache, &d)?;
        }
        Ok(d)
    }

    // --- structure accessors for the gradient-check evaluator ---------------

    pub(crate) fn encoder_blocks(&self) -> Vec<(ConvSpec, ParamId, ParamId)> {
        self.encoder.iter().map(|b| (b.spec, b.w, b.b)).collect()
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn st_parts(
        &self,
    ) -> Option<(
        (WeightMode, usize, usize, usize, &[crate::lstm::LstmWeights]),
        (ConvSpec, ParamId, ParamId),
    )> {
        self.st.as_ref().map(|st| {
            (
                (
                    st.grid.mode,
                    st.grid.width,
                    st.grid.height,
                    st.grid.hidden,
                    st.grid.weight_sets(),
                ),
                (st.proj.spec, st.proj.w, st.proj.b),
            )
        })
    }

    pub(crate) fn fusion_parts(&self) -> Option<FusionParts<'_>> {
        self.fusion.as_ref().map(|f| FusionParts {
            down: (f.down.spec, f.down.w, f.down.b),
            grid: (
                f.grid.mode,
                f.grid.width,
                f.grid.height,
                f.grid.hidden,
                f.grid.weight_sets(),
            ),
            proj: (f.proj.spec, f.proj.w, f.proj.b),
            up: (f.up.spec, f.up.w),
            ctx: (f.context.spec, f.context.w, f.context.b),
        })
    }

    pub(crate) fn classifier_parts(&self) -> (ConvSpec, ParamId, ParamId) {
        (self.classifier.spec, self.classifier.w, self.classifier.b)
    }

    pub(crate) fn out_parts(&self) -> (DeconvSpec, ParamId) {
        (self.out.spec, self.out.w)
    }

    // --- checkpointing -----------------------------------------------------

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("params"))?;
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            grid_extent: self.grid_extent.map(|(h, w)| FrameExtent {
                height: h,
                width: w,
            }),
            params: self
                .params
                .iter()
                .map(|(name, _)| name.to_string())
                .collect(),
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        for (i, id) in self.params.ids().enumerate() {
            self.params
                .value(id)
                .save(&dir.join("params").join(format!("{i:04}.sttn")))?;
        }
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Data(format!("cannot read checkpoint manifest: {e}")))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut model = build_for(
            &manifest.config,
            manifest.grid_extent.map(|e| (e.height, e.width)),
        )?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        if ids.len() != manifest.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model defines {}",
                manifest.params.len(),
                ids.len()
            )));
        }
        for (i, id) in ids.into_iter().enumerate() {
            if model.params.name(id) != manifest.params[i] {
                return Err(Error::Data(format!(
                    "checkpoint parameter {i} is {:?}, model expects {:?}",
                    manifest.params[i],
                    model.params.name(id)
                )));
            }
            let t = Tensor::load(&dir.join("params").join(format!("{i:04}.sttn")))?;
            if t.shape() != model.params.value(id).shape() {
                return Err(Error::shape(
                    "checkpoint parameter",
                    model.params.value(id).shape(),
                    t.shape(),
                ));
            }
            model.params.get_mut(id).value = t;
        }
        Ok(model)
    }
}

pub(crate) struct FusionParts<'m> {
    pub down: (ConvSpec, ParamId, ParamId),
    pub grid: (WeightMode, usize, usize, usize, &'m [crate::lstm::LstmWeights]),
    pub proj: (ConvSpec, ParamId, ParamId),
    pub up: (DeconvSpec, ParamId),
    pub ctx: (ConvSpec, ParamId, ParamId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    grid_extent: Option<FrameExtent>,
    params: Vec<String>,
}

/// Pixelwise argmax over the class dimension; the lowest class index wins
/// ties. Input [B, n_cl, H, W], one label map per batch item.
pub fn predict(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let shp = logits.shape();
    if shp.len() != 4 {
        return Err(Error::shape("predict", &[0, 0, 0, 0], shp));
    }
    let (bsz, n_cl, h, w) = (shp[0], shp[1], shp[2], shp[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let base = b * n_cl * plane;
        let mut lm = LabelMap::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                let mut best = 0usize;
                let mut best_v = logits.data()[base + pix];
                for c in 1..n_cl {
                    let v = logits.data()[base + c * plane + pix];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                lm.set(y, x, best as u8);
            }
        }
        out.push(lm);
    }
    Ok(out)
}

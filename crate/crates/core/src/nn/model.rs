use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::TransformerBlock;
use super::layers::{gaussian, AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Relu, ResBlock};
use super::real::Real;
use super::{Mode, ModelConfig, Module, Param};
use crate::config::SystemConfig;
use crate::error::{Error, Result};

/// Input channels of every frame: real and imaginary planes.
pub const INPUT_PLANES: usize = 2;

/// Architecture plus the input and output sizes fixed by the system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Subcarriers K.
    pub input_height: usize,
    /// Probing beams G.
    pub input_width: usize,
    /// Context frames P.
    pub context: usize,
    /// Near-field codebook size.
    pub num_classes: usize,
    pub config: ModelConfig,
}

impl ModelDims {
    pub fn new(sys: &SystemConfig, config: &ModelConfig) -> Self {
        Self {
            input_height: sys.num_subcarriers,
            input_width: sys.widebeam_count,
            context: sys.context_frames,
            num_classes: sys.codebook_size(),
            config: config.clone(),
        }
    }

    pub fn frame_len(&self) -> usize {
        INPUT_PLANES * self.input_height * self.input_width
    }

    /// Spatial size after the stride-2 residual block.
    pub fn feature_map(&self) -> (usize, usize) {
        ((self.input_height - 1) / 2 + 1, (self.input_width - 1) / 2 + 1)
    }

    pub fn flatten_len(&self) -> usize {
        self.config.channels * self.config.pool_grid[0] * self.config.pool_grid[1]
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (h, w) = self.feature_map();
        let [ph, pw] = self.config.pool_grid;
        if h < ph || w < pw {
            return Err(Error::InvalidConfig(format!(
                "feature map {h}x{w} is smaller than the pooling grid {ph}x{pw}"
            )));
        }
        if self.context == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig("context and class count must be positive".into()));
        }
        Ok(())
    }

    /// Exact parameter counts per named group, from the dimensions alone.
    pub fn param_table(&self) -> Vec<ParamGroup> {
        let c = &self.config;
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let bn = |ch: usize| 2 * ch;
        let res = |ci: usize, co: usize, stride: usize| {
            let skip = if stride != 1 || ci != co { conv(ci, co, 1) } else { 0 };
            conv(ci, co, 3) + bn(co) + conv(co, co, 3) + bn(co) + skip
        };
        let d = c.d_emb;
        let block = 2 * bn(d) + 3 * d * d + (d * d + d) + (d * c.ffn_dim + c.ffn_dim) + (c.ffn_dim * d + d);
        let groups = [
            ("cnn.stem", conv(INPUT_PLANES, c.stem_channels, 3) + bn(c.stem_channels)),
            ("cnn.res1", res(c.stem_channels, c.channels, 2)),
            ("cnn.res2", res(c.channels, c.channels, 1)),
            ("cnn.res3", res(c.channels, c.channels, 1)),
            ("cnn.proj", self.flatten_len() * d + d),
            ("gpt.pos_emb", self.context * d),
            ("gpt.blocks", c.num_layers * block),
            ("gpt.ln_f", 2 * d),
            ("head", d * self.num_classes + self.num_classes),
        ];
        groups
            .iter()
            .map(|&(name, count)| ParamGroup {
                name: name.to_string(),
                count,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub count: usize,
}

/// Multiply-accumulate estimate `sum_conv C_in C_out K_c^2 H W + L (P^2 D + P D^2)`
/// with `H x W` the output size of each convolution. The convolutional term
/// is for a single frame.
pub fn flops_estimate(dims: &ModelDims) -> u64 {
    let c = &dims.config;
    let (h0, w0) = (dims.input_height as u64, dims.input_width as u64);
    let (h1, w1) = dims.feature_map();
    let (h1, w1) = (h1 as u64, w1 as u64);
    let conv = |ci: usize, co: usize, k: u64, h: u64, w: u64| ci as u64 * co as u64 * k * k * h * w;
    let (c0, ch) = (c.stem_channels, c.channels);
    let mut cnn = conv(INPUT_PLANES, c0, 3, h0, w0);
    cnn += conv(c0, ch, 3, h1, w1) + conv(ch, ch, 3, h1, w1) + conv(c0, ch, 1, h1, w1);
    cnn += 2 * (conv(ch, ch, 3, h1, w1) + conv(ch, ch, 3, h1, w1));
    let (p, d) = (dims.context as u64, c.d_emb as u64);
    cnn + c.num_layers as u64 * (p * p * d + p * d * d)
}

/// Per-frame feature extractor: stem conv-BN-ReLU, three residual blocks
/// (the first with stride 2), adaptive average pooling and a projection
/// `FC-ReLU-dropout` to `d_emb`.
#[derive(Clone, Debug)]
pub struct Cnn<T> {
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    stem_relu: Relu,
    pub res: [ResBlock<T>; 3],
    pub pool: AdaptiveAvgPool2d,
    pub proj: Linear<T>,
    proj_relu: Relu,
    proj_drop: Dropout<T>,
    height: usize,
    width: usize,
    trace: Option<(usize, (usize, usize))>,
}

impl<T: Real> Cnn<T> {
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        let c = &dims.config;
        Self {
            stem: Conv2d::new("cnn.stem.conv", INPUT_PLANES, c.stem_channels, 3, 1, 1, rng),
            stem_bn: BatchNorm2d::new("cnn.stem.bn", c.stem_channels),
            stem_relu: Relu::new(),
            res: [
                ResBlock::new("cnn.res1", c.stem_channels, c.channels, 2, c.dropout, rng),
                ResBlock::new("cnn.res2", c.channels, c.channels, 1, c.dropout, rng),
                ResBlock::new("cnn.res3", c.channels, c.channels, 1, c.dropout, rng),
            ],
            pool: AdaptiveAvgPool2d::new(c.pool_grid[0], c.pool_grid[1]),
            proj: Linear::new("cnn.proj", dims.flatten_len(), c.d_emb, true, c.init_std, rng),
            proj_relu: Relu::new(),
            proj_drop: Dropout::new(c.dropout),
            height: dims.input_height,
            width: dims.input_width,
            trace: None,
        }
    }

    /// `x` is `n x 2 x H x W`; returns `n x d_emb`.
    pub fn forward<R: Rng + ?Sized>(&mut self, x: &[T], n: usize, mode: Mode, rng: &mut R) -> Result<Vec<T>> {
        let (h, w) = (self.height, self.width);
        if x.len() != n * INPUT_PLANES * h * w {
            return Err(Error::DimensionMismatch(format!(
                "CNN input has {} values, expected {n} x {INPUT_PLANES} x {h} x {w}",
                x.len()
            )));
        }
        let (a, _, _) = self.stem.forward(x, n, h, w, mode);
        let a = self.stem_bn.forward(&a, n, h * w, mode);
        let mut a = self.stem_relu.forward(a, mode);
        let (mut hh, mut ww) = (h, w);
        for rb in &mut self.res {
            let (y, h2, w2) = rb.forward(&a, n, hh, ww, mode, rng);
            a = y;
            hh = h2;
            ww = w2;
        }
        let ch = self.res[2].conv2.c_out;
        let pooled = self.pool.forward(&a, n * ch, hh, ww, mode)?;
        let f = self.proj.forward(&pooled, n, mode);
        let f = self.proj_relu.forward(f, mode);
        let f = self.proj_drop.forward(f, mode, rng);
        self.trace = (mode == Mode::Train).then_some((n, (hh, ww)));
        Ok(f)
    }

    pub fn backward(&mut self, dy: &[T]) -> Result<Vec<T>> {
        self.trace.take().ok_or(Error::MissingTrace)?;
        let g = self.proj_drop.backward(dy.to_vec())?;
        let g = self.proj_relu.backward(g)?;
        let g = self.proj.backward(&g)?;
        let mut g = self.pool.backward(&g)?;
        for rb in self.res.iter_mut().rev() {
            g = rb.backward(g)?;
        }
        let g = self.stem_relu.backward(g)?;
        let g = self.stem_bn.backward(&g)?;
        self.stem.backward(&g)
    }
}

impl<T: Real> Module<T> for Cnn<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.stem.visit_params(f);
        self.stem_bn.visit_params(f);
        for rb in &mut self.res {
            rb.visit_params(f);
        }
        self.proj.visit_params(f);
    }

    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.stem_bn.visit_buffers(f);
        for rb in &mut self.res {
            rb.visit_buffers(f);
        }
    }
}

/// Which leading parts of the network are frozen.
///
/// Frozen parts run in evaluation mode (batch-norm running statistics, no
/// dropout), receive no gradient and are skipped by the backward pass. The
/// positional embeddings sit below the first transformer block and are
/// frozen together with it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub cnn: bool,
    pub blocks: usize,
}

impl Freeze {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn positions_frozen(&self) -> bool {
        self.blocks > 0
    }

    /// The CNN and the first `blocks` decoder blocks.
    pub fn prefix(blocks: usize) -> Self {
        Self { cnn: true, blocks }
    }

    /// Whether the parameter called `name` is trainable.
    pub fn allows(&self, name: &str) -> bool {
        if name.starts_with("cnn.") {
            return !self.cnn;
        }
        if name.starts_with("gpt.pos_emb") {
            return !self.positions_frozen();
        }
        if let Some(rest) = name.strip_prefix("gpt.block") {
            let idx: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            return idx >= self.blocks;
        }
        true
    }
}

/// CNN features plus learned positions, a stack of decoder blocks, a final
/// layer norm and a linear head producing per-position logits.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub cnn: Cnn<T>,
    pub pos_emb: Param<T>,
    emb_drop: Dropout<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub ln_f: LayerNorm<T>,
    pub head: Linear<T>,
    pub freeze: Freeze,
    trace: Option<(usize, usize)>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let c = &dims.config;
        let d = c.d_emb;
        let cnn = Cnn::new(dims, rng);
        let pos_emb = Param::new(
            "gpt.pos_emb",
            &[dims.context, d],
            gaussian(dims.context * d, c.init_std, rng),
        );
        let blocks = (0..c.num_layers)
            .map(|i| {
                TransformerBlock::new(
                    &format!("gpt.block{i}"),
                    d,
                    c.num_heads,
                    c.ffn_dim,
                    c.dropout,
                    c.causal,
                    c.init_std,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            dims: dims.clone(),
            cnn,
            pos_emb,
            emb_drop: Dropout::new(c.dropout),
            blocks,
            ln_f: LayerNorm::new("gpt.ln_f", d),
            head: Linear::new("head", d, dims.num_classes, true, c.init_std, rng),
            freeze: Freeze::none(),
            trace: None,
        })
    }

    /// `x` is `batch x seq x 2 x K x G`; returns logits `batch x seq x classes`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: &[T],
        batch: usize,
        seq: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        if seq == 0 || seq > self.dims.context {
            return Err(Error::DimensionMismatch(format!(
                "sequence length {seq} outside 1..={}",
                self.dims.context
            )));
        }
        let n = batch * seq;
        if x.len() != n * self.dims.frame_len() {
            return Err(Error::DimensionMismatch(format!(
                "model input has {} values, expected {batch} x {seq} x {}",
                x.len(),
                self.dims.frame_len()
            )));
        }
        let sub = |frozen: bool| if frozen { Mode::Eval } else { mode };
        let d = self.dims.config.d_emb;
        let mut z = self.cnn.forward(x, n, sub(self.freeze.cnn), rng)?;
        for (r, row) in z.chunks_exact_mut(d).enumerate() {
            let p = r % seq;
            for (v, &e) in row.iter_mut().zip(&self.pos_emb.value[p * d..(p + 1) * d]) {
                *v += e;
            }
        }
        let mut z = self.emb_drop.forward(z, sub(self.freeze.positions_frozen()), rng);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            z = blk.forward(&z, batch, seq, sub(i < self.freeze.blocks), rng);
        }
        let z = self.ln_f.forward(&z, mode);
        let logits = self.head.forward(&z, n, mode);
        self.trace = (mode == Mode::Train).then_some((batch, seq));
        Ok(logits)
    }

    /// Backpropagates `dlogits`, accumulating gradients of every trainable
    /// parameter. Returns the input gradient when nothing is frozen.
    pub fn backward(&mut self, dlogits: &[T]) -> Result<Option<Vec<T>>> {
        let (_batch, seq) = self.trace.take().ok_or(Error::MissingTrace)?;
        let d = self.dims.config.d_emb;
        let g = self.head.backward(dlogits)?;
        let mut g = self.ln_f.backward(&g)?;
        let first_trainable = self.freeze.blocks.min(self.blocks.len());
        for blk in self.blocks[first_trainable..].iter_mut().rev() {
            g = blk.backward(&g)?;
        }
        if self.freeze.positions_frozen() {
            return Ok(None);
        }
        let g = self.emb_drop.backward(g)?;
        for (r, row) in g.chunks_exact(d).enumerate() {
            let p = r % seq;
            for (acc, &v) in self.pos_emb.grad[p * d..(p + 1) * d].iter_mut().zip(row) {
                *acc += v;
            }
        }
        if self.freeze.cnn {
            return Ok(None);
        }
        self.cnn.backward(&g).map(Some)
    }

    /// Exact counts per group, measured on the instantiated parameters.
    pub fn param_count(&mut self) -> Vec<ParamGroup> {
        let table = self.dims.param_table();
        let mut counts = vec![0usize; table.len()];
        let group_of = |name: &str| -> usize {
            table
                .iter()
                .position(|g| name.starts_with(g.name.as_str()))
                .or_else(|| {
                    name.starts_with("gpt.block")
                        .then(|| table.iter().position(|g| g.name == "gpt.blocks").unwrap())
                })
                .unwrap_or_else(|| panic!("parameter {name} belongs to no group"))
        };
        self.visit_params(&mut |p| counts[group_of(&p.name)] += p.len());
        table
            .into_iter()
            .zip(counts)
            .map(|(g, count)| ParamGroup { name: g.name, count })
            .collect()
    }

    /// Whether a parameter is updated under the current freeze policy.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.freeze.allows(name)
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.cnn.visit_params(f);
        f(&mut self.pos_emb);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.ln_f.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param<T>)) {
        self.cnn.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_dims() -> ModelDims {
        ModelDims::new(&SystemConfig::preset(Preset::Desk), &ModelConfig::preset(Preset::Desk))
    }

    fn paper_dims() -> ModelDims {
        ModelDims::new(
            &SystemConfig::preset(Preset::Paper),
            &ModelConfig::preset(Preset::Paper),
        )
    }

    #[test]
    fn desk_logit_shape() {
        let dims = desk_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::<f32>::new(&dims, &mut rng).unwrap();
        let x = vec![0.1f32; 5 * dims.frame_len()];
        let y = m.forward(&x, 1, 5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.len(), 5 * 96);
        assert_eq!(dims.flatten_len(), 64);
    }

    #[test]
    fn paper_flatten_and_head() {
        let dims = paper_dims();
        assert_eq!(dims.feature_map(), (30, 32));
        assert_eq!(dims.flatten_len(), 1024);
        assert_eq!(dims.num_classes, 1280);
        let t = dims.param_table();
        let get = |n: &str| t.iter().find(|g| g.name == n).unwrap().count;
        assert_eq!(get("head"), 656_640);
        assert_eq!(get("cnn.proj"), 1024 * 512 + 512);
        assert_eq!(get("gpt.pos_emb"), 3584);
        assert_eq!(get("cnn.stem"), 2 * 32 * 9 + 32 + 64);
        assert_eq!(get("gpt.blocks"), 4 * 3_150_848);
    }

    #[test]
    fn table_matches_instantiated_model() {
        let dims = desk_dims();
        let mut m = Model::<f32>::new(&dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.param_count(), dims.param_table());
        let mut d0 = dims.clone();
        d0.config.num_layers = 0;
        let mut m0 = Model::<f32>::new(&d0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let t = m0.param_count();
        assert_eq!(t.iter().find(|g| g.name == "gpt.blocks").unwrap().count, 0);
    }

    #[test]
    fn eval_forward_is_pure() {
        let dims = desk_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::<f32>::new(&dims, &mut rng).unwrap();
        let x: Vec<f32> = (0..2 * 5 * dims.frame_len()).map(|i| (i as f32 * 0.01).sin()).collect();
        let a = m.forward(&x, 2, 5, Mode::Eval, &mut rng).unwrap();
        let b = m
            .forward(&x, 2, 5, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut dims = desk_dims();
        dims.config.dropout = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cnn = Cnn::<f64>::new(&dims, &mut rng);
        let f = cnn
            .forward(&vec![0.0; 3 * dims.frame_len()], 3, Mode::Eval, &mut rng)
            .unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flops_examples() {
        let mut dims = desk_dims();
        dims.config.num_layers = 0;
        let base = flops_estimate(&dims);
        assert_eq!(2 * 32 * 9 * 64, 36_864);
        dims.config.stem_channels = 32;
        dims.config.num_layers = 1;
        let p5 = flops_estimate(&dims);
        dims.context = 10;
        let p10 = flops_estimate(&dims);
        let d = 64u64;
        assert_eq!(p10 - p5, (100 - 25) * d + 5 * d * d);
        assert!(base > 0);
    }

    #[test]
    fn rejects_oversized_pool_grid() {
        let mut dims = desk_dims();
        dims.config.pool_grid = [5, 5];
        assert!(Model::<f32>::new(&dims, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn frozen_prefix_is_not_trainable() {
        let dims = desk_dims();
        let mut m = Model::<f32>::new(&dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.freeze = Freeze { cnn: true, blocks: 1 };
        assert!(!m.is_trainable("cnn.res1.conv1.weight"));
        assert!(!m.is_trainable("gpt.pos_emb"));
        assert!(!m.is_trainable("gpt.block0.attn.w_q.weight"));
        assert!(m.is_trainable("gpt.block1.attn.w_q.weight"));
        assert!(m.is_trainable("head.weight"));
    }
}

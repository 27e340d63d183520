use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu_backward, relu_inplace, Conv2d, ConvTranspose2x2, Norm, NormMode, Param};
use super::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Residual blocks per level. The defaults reproduce the published
/// parameter counts of the three network depths to within 0.1%.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockLayout {
    /// Blocks at every encoder level above the bridge.
    pub encoder: usize,
    /// Blocks at the deepest level.
    pub bridge: usize,
    /// Blocks after each skip concatenation.
    pub decoder: usize,
}

impl Default for BlockLayout {
    fn default() -> Self {
        BlockLayout {
            encoder: 1,
            bridge: 3,
            decoder: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub depth: usize,
    pub filters: Vec<usize>,
    #[serde(default)]
    pub norm_mode: NormMode,
    pub input_dim: usize,
    #[serde(default)]
    pub layout: BlockLayout,
}

/// Published trainable parameter counts for depths 5, 6 and 7.
pub const PUBLISHED_PARAMETERS: [(usize, usize); 3] = [(5, 4_715_441), (6, 18_882_481), (7, 75_528_113)];

impl ModelSpec {
    /// The standard ladder `16, 32, …` for `depth` levels.
    pub fn standard(depth: usize, norm_mode: NormMode, input_dim: usize) -> ModelSpec {
        Self::scaled(depth, 16, norm_mode, input_dim)
    }

    /// A doubling ladder starting at `base` filters.
    pub fn scaled(depth: usize, base: usize, norm_mode: NormMode, input_dim: usize) -> ModelSpec {
        ModelSpec {
            depth,
            filters: (0..depth).map(|l| base << l).collect(),
            norm_mode,
            input_dim,
            layout: BlockLayout::default(),
        }
    }

    /// Short name such as `E-D6`.
    pub fn name(&self) -> String {
        format!("E-D{}", self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::SpecError(m));
        if !(2..=8).contains(&self.depth) {
            return err(format!("depth {} outside 2..=8", self.depth));
        }
        if self.filters.len() != self.depth {
            return err(format!(
                "{} filter counts for depth {}",
                self.filters.len(),
                self.depth
            ));
        }
        if self.filters[0] == 0 || self.filters.windows(2).any(|w| w[1] != 2 * w[0]) {
            return err(format!("filters {:?} do not double per level", self.filters));
        }
        let stride = 1usize << (self.depth - 1);
        if self.input_dim == 0 || self.input_dim % stride != 0 {
            return err(format!(
                "input_dim {} not divisible by 2^{} = {stride}",
                self.input_dim,
                self.depth - 1
            ));
        }
        let l = &self.layout;
        if l.encoder == 0 || l.bridge == 0 || l.decoder == 0 {
            return err("every level needs at least one residual block".into());
        }
        Ok(())
    }

    /// Channels and spatial size at the deepest level, e.g. `(256, 32, 32)`.
    pub fn encoding_shape(&self) -> (usize, usize, usize) {
        let s = self.input_dim >> (self.depth - 1);
        (self.filters[self.depth - 1], s, s)
    }
}

/// Two 3×3 convolutions with normalization, and a 1×1 projection shortcut.
/// With `stride` 2 the first convolution is 2×2/2 and the shortcut is 1×1/2.
#[derive(Debug, Clone)]
struct ResBlock<T> {
    conv1: Conv2d<T>,
    norm1: Norm<T>,
    conv2: Conv2d<T>,
    norm2: Norm<T>,
    shortcut: Conv2d<T>,
    relu1: Vec<bool>,
    relu_out: Vec<bool>,
}

impl<T: Element> ResBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, mode: NormMode, rng: &mut ChaCha8Rng) -> Self {
        let (k1, p1) = if stride == 2 { (2, 0) } else { (3, 1) };
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, k1, stride, p1, false, 2.0, rng),
            norm1: Norm::new(&format!("{name}.norm1"), cout, mode),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, 2.0, rng),
            norm2: Norm::new(&format!("{name}.norm2"), cout, mode),
            shortcut: Conv2d::new(&format!("{name}.shortcut"), cin, cout, 1, stride, 0, false, 1.0, rng),
            relu1: Vec::new(),
            relu_out: Vec::new(),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.norm1.forward(&self.conv1.forward(x));
        relu_inplace(&mut h);
        let mut h = self.norm2.forward(&self.conv2.forward(&h));
        h.add_assign(&self.shortcut.forward(x));
        relu_inplace(&mut h);
        h
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward_train(x);
        let mut h = self.norm1.forward_train(&h);
        self.relu1 = relu_inplace(&mut h);
        let h = self.conv2.forward_train(&h);
        let mut h = self.norm2.forward_train(&h);
        h.add_assign(&self.shortcut.forward_train(x));
        self.relu_out = relu_inplace(&mut h);
        h
    }

    fn backward(&mut self, mut dy: Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        relu_backward(&mut dy, &self.relu_out);
        let dsc = self.shortcut.backward(&dy, need_input_grad);
        let dh = self.norm2.backward(&dy);
        let mut dh = self.conv2.backward(&dh, true).expect("input grad");
        relu_backward(&mut dh, &self.relu1);
        let dh = self.norm1.backward(&dh);
        let dx = self.conv1.backward(&dh, need_input_grad);
        match (dx, dsc) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv1.params().into_iter().for_each(&mut *f);
        self.norm1.params().into_iter().for_each(&mut *f);
        self.conv2.params().into_iter().for_each(&mut *f);
        self.norm2.params().into_iter().for_each(&mut *f);
        self.shortcut.params().into_iter().for_each(&mut *f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.params_mut().into_iter().for_each(&mut *f);
        self.norm1.params_mut().into_iter().for_each(&mut *f);
        self.conv2.params_mut().into_iter().for_each(&mut *f);
        self.norm2.params_mut().into_iter().for_each(&mut *f);
        self.shortcut.params_mut().into_iter().for_each(&mut *f);
    }

    fn norms_mut(&mut self) -> [&mut Norm<T>; 2] {
        [&mut self.norm1, &mut self.norm2]
    }

    fn norms(&self) -> [&Norm<T>; 2] {
        [&self.norm1, &self.norm2]
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel<T> {
    up: ConvTranspose2x2<T>,
    blocks: Vec<ResBlock<T>>,
    skip_channels: usize,
}

/// Residual encoder-decoder with skip concatenations and a single-channel
/// sigmoid head.
#[derive(Debug, Clone)]
pub struct EdNet<T: Element = f32> {
    spec: ModelSpec,
    seed: u64,
    encoder: Vec<Vec<ResBlock<T>>>,
    /// Ordered from the deepest decoder level up to level 0.
    decoder: Vec<DecoderLevel<T>>,
    head: Conv2d<T>,
}

/// One named tensor of the parameter dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

pub fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> EdNet<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = &spec.filters;
        let d = spec.depth;
        let mode = spec.norm_mode;
        let mut encoder = Vec::with_capacity(d);
        let mut c = 1;
        for l in 0..d {
            let n = if l == d - 1 { spec.layout.bridge } else { spec.layout.encoder };
            let mut blocks = Vec::with_capacity(n);
            for j in 0..n {
                let stride = if l > 0 && j == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(&format!("enc{l}.block{j}"), c, f[l], stride, mode, &mut rng));
                c = f[l];
            }
            encoder.push(blocks);
        }
        let mut decoder = Vec::with_capacity(d - 1);
        for l in (0..d - 1).rev() {
            let up = ConvTranspose2x2::new(&format!("dec{l}.up"), c, f[l], &mut rng);
            c = 2 * f[l];
            let mut blocks = Vec::with_capacity(spec.layout.decoder);
            for j in 0..spec.layout.decoder {
                blocks.push(ResBlock::new(&format!("dec{l}.block{j}"), c, f[l], 1, mode, &mut rng));
                c = f[l];
            }
            decoder.push(DecoderLevel {
                up,
                blocks,
                skip_channels: f[l],
            });
        }
        let head = Conv2d::new("head", c, 1, 1, 1, 0, true, 1.0, &mut rng);
        Ok(EdNet {
            spec: spec.clone(),
            seed,
            encoder,
            decoder,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let d = self.spec.input_dim;
        if x.c != 1 || x.h != d || x.w != d || x.n == 0 {
            return Err(Error::ShapeError(format!(
                "expected N×1×{d}×{d} input, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference pass returning pre-sigmoid logits.
    pub fn forward_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.spec.depth - 1);
        let mut h = x.clone();
        for (l, blocks) in self.encoder.iter().enumerate() {
            for b in blocks {
                h = b.forward(&h);
            }
            if l + 1 < self.spec.depth {
                skips.push(h.clone());
            }
        }
        for level in &self.decoder {
            let up = level.up.forward(&h);
            let skip = skips.pop().expect("one skip per decoder level");
            h = Tensor::concat_channels(&up, &skip);
            drop((up, skip));
            for b in &level.blocks {
                h = b.forward(&h);
            }
        }
        Ok(self.head.forward(&h))
    }

    /// Probability map for a batch: same spatial shape, values in `(0, 1)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.forward_logits(x)?;
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(y)
    }

    /// Training pass: caches activations and updates batch statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for b in blocks {
                h = b.forward_train(&h);
            }
            if l + 1 < depth {
                skips.push(h.clone());
            }
        }
        for level in &mut self.decoder {
            let up = level.up.forward_train(&h);
            let skip = skips.pop().expect("one skip per decoder level");
            h = Tensor::concat_channels(&up, &skip);
            for b in &mut level.blocks {
                h = b.forward_train(&h);
            }
        }
        Ok(self.head.forward_train(&h))
    }

    /// Back-propagates the gradient of the loss with respect to the logits
    /// returned by the last [`EdNet::forward_train`]. Gradients accumulate.
    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let mut dh = self.head.backward(dlogits, true).expect("input grad");
        let mut dskips = Vec::with_capacity(self.decoder.len());
        for level in self.decoder.iter_mut().rev() {
            for b in level.blocks.iter_mut().rev() {
                dh = b.backward(dh, true).expect("input grad");
            }
            let (dup, dskip) = dh.split_channels(dh.c - level.skip_channels);
            dskips.push(dskip);
            dh = level.up.backward(&dup);
        }
        let mut grad = Some(dh);
        for (l, blocks) in self.encoder.iter_mut().enumerate().rev() {
            let mut g = grad.take().expect("gradient below level 0");
            if l + 1 < self.spec.depth {
                g.add_assign(&dskips.pop().expect("one skip gradient per level"));
            }
            grad = Some(g);
            for (j, b) in blocks.iter_mut().enumerate().rev() {
                let first = l == 0 && j == 0;
                grad = b.backward(grad.take().expect("gradient"), !first);
            }
        }
    }

    /// Visits every trainable tensor in a fixed order.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(&'a Param<T>)) {
        for blocks in &self.encoder {
            blocks.iter().for_each(|b| b.visit(&mut f));
        }
        for level in &self.decoder {
            f(&level.up.weight);
            level.blocks.iter().for_each(|b| b.visit(&mut f));
        }
        self.head.params().into_iter().for_each(f);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Param<T>)) {
        for blocks in &mut self.encoder {
            blocks.iter_mut().for_each(|b| b.visit_mut(&mut f));
        }
        for level in &mut self.decoder {
            f(&mut level.up.weight);
            level.blocks.iter_mut().for_each(|b| b.visit_mut(&mut f));
        }
        self.head.params_mut().into_iter().for_each(f);
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        self.visit_params(|p| v.push(p));
        v
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|p| p.zero_grad());
    }

    fn norms(&self) -> Vec<&Norm<T>> {
        let mut v = Vec::new();
        for blocks in &self.encoder {
            blocks.iter().for_each(|b| v.extend(b.norms()));
        }
        for level in &self.decoder {
            level.blocks.iter().for_each(|b| v.extend(b.norms()));
        }
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut Norm<T>> {
        let mut v = Vec::new();
        for blocks in &mut self.encoder {
            blocks.iter_mut().for_each(|b| v.extend(b.norms_mut()));
        }
        for level in &mut self.decoder {
            level.blocks.iter_mut().for_each(|b| v.extend(b.norms_mut()));
        }
        v
    }

    /// Non-trainable state: running statistics of batch-mode normalization.
    pub fn buffers(&self) -> Vec<(String, Vec<T>)> {
        if self.spec.norm_mode != NormMode::Batch {
            return Vec::new();
        }
        let mut out = Vec::new();
        for n in self.norms() {
            let base = n.gamma.name.trim_end_matches(".gamma").to_string();
            out.push((format!("{base}.running_mean"), n.running_mean.clone()));
            out.push((format!("{base}.running_var"), n.running_var.clone()));
        }
        out
    }

    pub(crate) fn set_buffer(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        for n in self.norms_mut() {
            let base = n.gamma.name.trim_end_matches(".gamma").to_string();
            let slot = if name == format!("{base}.running_mean") {
                &mut n.running_mean
            } else if name == format!("{base}.running_var") {
                &mut n.running_var
            } else {
                continue;
            };
            if slot.len() != values.len() {
                return Err(Error::ShapeError(format!("buffer {name}: length {}", values.len())));
            }
            *slot = values;
            return Ok(());
        }
        Err(Error::ShapeError(format!("unknown buffer {name}")))
    }

    pub fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit_params(|p| n += p.len());
        n
    }

    pub fn layer_dump(&self) -> Vec<LayerCount> {
        let mut v = Vec::new();
        self.visit_params(|p| {
            v.push(LayerCount {
                name: p.name.clone(),
                shape: p.shape.clone(),
                count: p.len(),
            })
        });
        v
    }

    /// Order-sensitive checksum of every parameter value.
    pub fn checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit_params(|p| {
            h.update(p.name.as_bytes());
            h.update(T::to_le_bytes_vec(&p.value));
        });
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    /// Copies all weights and buffers from a model of the same spec.
    pub fn load_state_from(&mut self, other: &EdNet<T>) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::SpecError("state from a different spec".into()));
        }
        *self = other.clone();
        Ok(())
    }
}

/// Plain-text table of every trainable tensor with per-level subtotals.
pub fn format_layer_dump(spec: &ModelSpec, dump: &[LayerCount]) -> String {
    let mut out = String::new();
    let total: usize = dump.iter().map(|l| l.count).sum();
    let _ = writeln!(out, "{} filters {:?} layout {:?}", spec.name(), spec.filters, spec.layout);
    let mut group = String::new();
    let mut subtotal = 0;
    for l in dump {
        let g = l.name.split('.').next().unwrap_or("").to_string();
        if g != group {
            if !group.is_empty() {
                let _ = writeln!(out, "  {group:<40} subtotal {subtotal:>12}");
            }
            group = g;
            subtotal = 0;
        }
        subtotal += l.count;
        let _ = writeln!(out, "{:<42} {:<20} {:>12}", l.name, format!("{:?}", l.shape), l.count);
    }
    if !group.is_empty() {
        let _ = writeln!(out, "  {group:<40} subtotal {subtotal:>12}");
    }
    let _ = writeln!(out, "total {total}");
    out
}

/// Layer-by-layer dumps of the full-size models at `dim`, each followed by
/// its difference from the reference count.
pub fn param_dump(depths: &[usize], dim: usize) -> Result<String> {
    let mut out = String::new();
    for &d in depths {
        let spec = ModelSpec::standard(d, NormMode::Instance, dim);
        let net = EdNet::<f32>::build(&spec, 0)?;
        out.push_str(&format_layer_dump(&spec, &net.layer_dump()));
        if let Some(&(_, reference)) = PUBLISHED_PARAMETERS.iter().find(|(k, _)| *k == d) {
            let diff = net.count_parameters() as f64 - reference as f64;
            let _ = writeln!(
                out,
                "reference {reference}, difference {diff:+} ({:+.3}%)\n",
                100.0 * diff / reference as f64
            );
        }
    }
    Ok(out)
}

/// Trainable parameter count without allocating the weights.
pub fn count_parameters_for(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    let f = &spec.filters;
    let d = spec.depth;
    let block = |cin: usize, cout: usize, k1: usize| k1 * k1 * cin * cout + 9 * cout * cout + cin * cout + 4 * cout;
    let mut total = 0;
    let mut c = 1;
    for l in 0..d {
        let n = if l == d - 1 { spec.layout.bridge } else { spec.layout.encoder };
        for j in 0..n {
            total += block(c, f[l], if l > 0 && j == 0 { 2 } else { 3 });
            c = f[l];
        }
    }
    for l in (0..d - 1).rev() {
        total += 4 * c * f[l];
        c = 2 * f[l];
        for _ in 0..spec.layout.decoder {
            total += block(c, f[l], 3);
            c = f[l];
        }
    }
    Ok(total + c + 1)
}

//! Multi-layer inference on mesh-programmed weights.
//!
//! An [`OnnModel`] is a stack of [`MeshLayer`]s — dense, or convolutional
//! via im2col patch extraction — joined by a clipped-ReLU optical
//! nonlinearity (no activation after the last layer, and no bias terms
//! anywhere: the mesh realizes pure matrix products). Every forward pass
//! runs through a [`NoiseRealization`], so the model always computes with
//! the phases the hardware would actually realize; a zero-noise realization
//! reproduces the nominal phases bit for bit.
//!
//! Each batched forward pass that would touch hardware counts as one query
//! in the [`PowerLedger`]: loss evaluations and accuracy probes alike.

use crate::ledger::PowerLedger;
use crate::linalg::Mat;
use crate::mesh::{build_weight_from, MeshBlock, MeshLayer};
use crate::noise::NoiseRealization;
use crate::{CoreError, Real, Result};

/// Default saturation level of the clipped-ReLU nonlinearity. Pretraining
/// hard-codes this value so deployed meshes reproduce the dense model.
pub const DEFAULT_CEILING: f64 = 4.0;

/// Clipped ReLU: `min(max(x, 0), ceiling)`, the saturating optical
/// nonlinearity between layers.
#[inline]
pub fn relu_clip<T: Real>(x: T, ceiling: T) -> T {
    if x < T::zero() {
        T::zero()
    } else if x > ceiling {
        ceiling
    } else {
        x
    }
}

/// Geometry of one valid (unpadded) convolution over a `C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvPlan {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvPlan {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if in_channels == 0 || in_h == 0 || in_w == 0 {
            return Err(CoreError::Argument("conv input dimensions must be positive".into()));
        }
        if kernel == 0 || stride == 0 {
            return Err(CoreError::Argument("kernel and stride must be positive".into()));
        }
        if kernel > in_h || kernel > in_w {
            return Err(CoreError::Argument(format!(
                "kernel {} exceeds input {}x{}",
                kernel, in_h, in_w
            )));
        }
        Ok(ConvPlan { in_channels, in_h, in_w, kernel, stride })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    /// Number of patch positions (output pixels per channel).
    pub fn n_patches(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Flattened patch length `C·k²` — the layer's input width.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Flattened input length `C·H·W`.
    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }
}

/// Unrolls one flattened `C×H×W` image into a patch matrix: row `c·k² +
/// ky·k + kx` and column `y·out_w + x` hold the input pixel the kernel tap
/// `(c, ky, kx)` sees at output position `(y, x)`.
///
/// A weight matrix times this patch matrix is the convolution as a single
/// GEMM, with output pixels laid out row-major per channel.
pub fn im2col<T: Real>(input: &[T], plan: &ConvPlan) -> Result<Mat<T>> {
    if input.len() != plan.input_len() {
        return Err(CoreError::Argument(format!(
            "expected {} input values for {}x{}x{}, got {}",
            plan.input_len(),
            plan.in_channels,
            plan.in_h,
            plan.in_w,
            input.len()
        )));
    }
    let k = plan.kernel;
    let (out_h, out_w) = (plan.out_h(), plan.out_w());
    let mut patches = Mat::zeros(plan.patch_len(), plan.n_patches());
    for c in 0..plan.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = c * k * k + ky * k + kx;
                for y in 0..out_h {
                    let in_row = y * plan.stride + ky;
                    for x in 0..out_w {
                        let in_col = x * plan.stride + kx;
                        patches[(row, y * out_w + x)] =
                            input[c * plan.in_h * plan.in_w + in_row * plan.in_w + in_col];
                    }
                }
            }
        }
    }
    Ok(patches)
}

/// A labeled mini-batch: one sample per input row.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub inputs: Mat<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Mat<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(CoreError::Argument("batch must contain at least one sample".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(CoreError::Argument(format!(
                "batch has {} samples but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy of row-wise logits against class labels.
///
/// Softmax is computed with max subtraction; the per-sample loss is capped
/// at `−ln(1e−12)` (equivalently, predicted probabilities are floored at
/// `1e−12`), so a hopeless logit gap cannot produce an infinite loss.
pub fn cross_entropy<T: Real>(logits: &Mat<T>, labels: &[usize]) -> Result<T> {
    let batch = logits.rows();
    let classes = logits.cols();
    if batch == 0 {
        return Err(CoreError::Argument("cross entropy needs at least one sample".into()));
    }
    if classes < 2 {
        return Err(CoreError::Argument(format!(
            "cross entropy needs at least two classes, got {}",
            classes
        )));
    }
    if labels.len() != batch {
        return Err(CoreError::Argument(format!(
            "{} logit rows but {} labels",
            batch,
            labels.len()
        )));
    }
    let cap = -T::c(1e-12).ln();
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(CoreError::Argument(format!(
                "label {} out of range for {} classes",
                label, classes
            )));
        }
        let row = logits.row(r);
        let mut max = row[0];
        for &z in &row[1..] {
            if z > max {
                max = z;
            }
        }
        let mut sum = T::zero();
        for &z in row {
            sum += (z - max).exp();
        }
        let lse = max + sum.ln();
        let raw = lse - row[label];
        total += if raw > cap { cap } else { raw };
    }
    Ok(total / T::c(batch as f64))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Where one phase bank sits in the flat global phase index space.
#[derive(Debug, Clone, Copy)]
pub struct BlockRange {
    pub layer: usize,
    pub block: MeshBlock,
    pub start: usize,
    pub len: usize,
}

/// Flat global indexing over every phase in the model, layer by layer and
/// bank by bank (U, then Σ, then V within each layer).
#[derive(Debug, Clone)]
pub struct PhaseLayout {
    ranges: Vec<BlockRange>,
    total: usize,
}

impl PhaseLayout {
    fn from_layers<T: Real>(layers: &[MeshLayer<T>]) -> Self {
        let mut ranges = Vec::with_capacity(layers.len() * 3);
        let mut start = 0usize;
        for (k, layer) in layers.iter().enumerate() {
            for block in [MeshBlock::U, MeshBlock::S, MeshBlock::V] {
                let len = layer.block_len(block);
                ranges.push(BlockRange { layer: k, block, start, len });
                start += len;
            }
        }
        PhaseLayout { ranges, total: start }
    }

    /// Total number of programmable phases.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ranges(&self) -> &[BlockRange] {
        &self.ranges
    }

    /// Bank lengths in global order; feed these to
    /// [`crate::noise::Adjacency::from_block_sizes`] so crosstalk neighborhoods
    /// match this layout.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len).collect()
    }

    /// Global start of one layer's bank.
    pub fn block_start(&self, layer: usize, block: MeshBlock) -> usize {
        self.ranges
            .iter()
            .find(|r| r.layer == layer && r.block == block)
            .map(|r| r.start)
            .expect("bank exists for every layer")
    }

    /// Global index range covering one whole layer.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let first = self.block_start(layer, MeshBlock::U);
        let last = self
            .ranges
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| r.start + r.len)
            .max()
            .expect("layer exists");
        first..last
    }

    /// Maps a global index to `(layer, bank, offset within bank)`.
    pub fn locate(&self, global: usize) -> Result<(usize, MeshBlock, usize)> {
        if global >= self.total {
            return Err(CoreError::Argument(format!(
                "phase index {} out of range for {} phases",
                global, self.total
            )));
        }
        // Ranges are sorted by start; find the last range starting at or
        // before the index.
        let pos = self.ranges.partition_point(|r| r.start <= global) - 1;
        let r = &self.ranges[pos];
        debug_assert!(global >= r.start && global < r.start + r.len);
        Ok((r.layer, r.block, global - r.start))
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    weight: Option<Mat<T>>,
    /// Realization id the cached weight was built under (0 = none).
    noise_tag: u64,
}

/// A stack of mesh layers with clipped-ReLU activations in between.
#[derive(Debug, Clone)]
pub struct OnnModel<T> {
    layers: Vec<MeshLayer<T>>,
    conv: Vec<Option<ConvPlan>>,
    ceiling: T,
    layout: PhaseLayout,
    cache: Vec<LayerCache<T>>,
}

impl<T: Real> OnnModel<T> {
    /// Builds a model from explicit layers; `conv[k]` marks layer `k` as a
    /// convolution over that geometry (its mesh must then be
    /// `out_channels × patch_len`).
    pub fn from_parts(
        layers: Vec<MeshLayer<T>>,
        conv: Vec<Option<ConvPlan>>,
        ceiling: T,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(CoreError::Argument("model needs at least one layer".into()));
        }
        if conv.len() != layers.len() {
            return Err(CoreError::Argument(format!(
                "{} layers but {} conv annotations",
                layers.len(),
                conv.len()
            )));
        }
        if !(ceiling > T::zero()) {
            return Err(CoreError::Argument(format!(
                "activation ceiling must be positive, got {}",
                ceiling
            )));
        }
        let mut prev_out: Option<usize> = None;
        for (k, layer) in layers.iter().enumerate() {
            let (in_dim, out_dim) = match &conv[k] {
                Some(plan) => {
                    if layer.cols() != plan.patch_len() {
                        return Err(CoreError::Argument(format!(
                            "conv layer {} mesh is {} wide but patches are {}",
                            k,
                            layer.cols(),
                            plan.patch_len()
                        )));
                    }
                    (plan.input_len(), layer.rows() * plan.n_patches())
                }
                None => (layer.cols(), layer.rows()),
            };
            if let Some(prev) = prev_out {
                if prev != in_dim {
                    return Err(CoreError::Argument(format!(
                        "layer {} expects {} inputs but layer {} produces {}",
                        k,
                        in_dim,
                        k - 1,
                        prev
                    )));
                }
            }
            prev_out = Some(out_dim);
        }
        let layout = PhaseLayout::from_layers(&layers);
        let cache = layers.iter().map(|_| LayerCache { weight: None, noise_tag: 0 }).collect();
        Ok(OnnModel { layers, conv, ceiling, layout, cache })
    }

    /// Fully-connected stack `dims[0] → dims[1] → … → dims[L]` with all-zero
    /// phases (each layer programs `bound·I`).
    pub fn new_mlp(dims: &[usize], sigma_bound: T, ceiling: T) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CoreError::Argument("an MLP needs at least input and output dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            layers.push(MeshLayer::new(w[1], w[0], sigma_bound)?);
        }
        let conv = vec![None; layers.len()];
        OnnModel::from_parts(layers, conv, ceiling)
    }

    pub fn layers(&self) -> &[MeshLayer<T>] {
        &self.layers
    }

    pub fn conv_plans(&self) -> &[Option<ConvPlan>] {
        &self.conv
    }

    pub fn ceiling(&self) -> T {
        self.ceiling
    }

    pub fn layout(&self) -> &PhaseLayout {
        &self.layout
    }

    pub fn phase_count(&self) -> usize {
        self.layout.total()
    }

    /// Width of the input the first layer consumes.
    pub fn in_dim(&self) -> usize {
        match &self.conv[0] {
            Some(plan) => plan.input_len(),
            None => self.layers[0].cols(),
        }
    }

    /// Width of the final layer's output (the number of classes).
    pub fn out_dim(&self) -> usize {
        let last = self.layers.len() - 1;
        match &self.conv[last] {
            Some(plan) => self.layers[last].rows() * plan.n_patches(),
            None => self.layers[last].rows(),
        }
    }

    pub fn phase(&self, global: usize) -> Result<T> {
        let (layer, block, off) = self.layout.locate(global)?;
        Ok(self.layers[layer].phase(block, off))
    }

    /// Writes one phase (wrapped to `[0, 2π)`) and invalidates that layer's
    /// cached weight.
    pub fn set_phase(&mut self, global: usize, value: T) -> Result<()> {
        let (layer, block, off) = self.layout.locate(global)?;
        self.layers[layer].set_phase(block, off, value)?;
        self.cache[layer] = LayerCache { weight: None, noise_tag: 0 };
        Ok(())
    }

    /// Snapshot of all nominal phases in global order.
    pub fn phases_vec(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.layout.total());
        for layer in &self.layers {
            out.extend_from_slice(layer.phi_u());
            out.extend_from_slice(layer.phi_s());
            out.extend_from_slice(layer.phi_v());
        }
        out
    }

    fn ensure_weight(&mut self, k: usize, noise: &NoiseRealization<T>) -> Result<()> {
        if self.cache[k].noise_tag == noise.id() && self.cache[k].weight.is_some() {
            return Ok(());
        }
        let layer = &self.layers[k];
        let phi_u =
            noise.corrupted_segment(self.layout.block_start(k, MeshBlock::U), layer.phi_u())?;
        let phi_s =
            noise.corrupted_segment(self.layout.block_start(k, MeshBlock::S), layer.phi_s())?;
        let phi_v =
            noise.corrupted_segment(self.layout.block_start(k, MeshBlock::V), layer.phi_v())?;
        let w = build_weight_from(
            layer.rows(),
            layer.cols(),
            &phi_u,
            &phi_s,
            &phi_v,
            layer.d_u(),
            layer.d_v(),
            layer.sigma_bound(),
        )?;
        self.cache[k] = LayerCache { weight: Some(w), noise_tag: noise.id() };
        Ok(())
    }

    /// The weight matrix layer `k` realizes under `noise` (cached per
    /// realization).
    pub fn noisy_weight(&mut self, k: usize, noise: &NoiseRealization<T>) -> Result<&Mat<T>> {
        self.ensure_weight(k, noise)?;
        Ok(self.cache[k].weight.as_ref().expect("just ensured"))
    }

    /// Forward pass without query accounting (internal plumbing for the
    /// metered entry points).
    pub fn forward_internal(
        &mut self,
        inputs: &Mat<T>,
        noise: &NoiseRealization<T>,
    ) -> Result<Mat<T>> {
        if inputs.cols() != self.in_dim() {
            return Err(CoreError::Argument(format!(
                "model expects {} input features, got {}",
                self.in_dim(),
                inputs.cols()
            )));
        }
        if noise.len() != self.layout.total() {
            return Err(CoreError::Argument(format!(
                "noise realization covers {} shifters but the model has {}",
                noise.len(),
                self.layout.total()
            )));
        }
        let n_layers = self.layers.len();
        let mut cur = inputs.clone();
        for k in 0..n_layers {
            self.ensure_weight(k, noise)?;
            let w = self.cache[k].weight.as_ref().expect("just ensured");
            let mut next = match &self.conv[k] {
                None => cur.matmul_nt(w),
                Some(plan) => {
                    let out_len = w.rows() * plan.n_patches();
                    let mut out = Mat::zeros(cur.rows(), out_len);
                    for s in 0..cur.rows() {
                        let patches = im2col(cur.row(s), plan)?;
                        let fmap = w.matmul(&patches);
                        let orow = out.row_mut(s);
                        orow.copy_from_slice(fmap.as_slice());
                    }
                    out
                }
            };
            if k + 1 < n_layers {
                let ceiling = self.ceiling;
                for r in 0..next.rows() {
                    for v in next.row_mut(r) {
                        *v = relu_clip(*v, ceiling);
                    }
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Metered forward pass: one hardware query for the whole batch.
    pub fn forward(
        &mut self,
        inputs: &Mat<T>,
        noise: &NoiseRealization<T>,
        ledger: &mut PowerLedger<T>,
    ) -> Result<Mat<T>> {
        ledger.bump_query();
        self.forward_internal(inputs, noise)
    }

    /// Mean cross-entropy on a batch; one query.
    pub fn batch_loss(
        &mut self,
        batch: &Batch<T>,
        noise: &NoiseRealization<T>,
        ledger: &mut PowerLedger<T>,
    ) -> Result<T> {
        let logits = self.forward(&batch.inputs, noise, ledger)?;
        cross_entropy(&logits, &batch.labels)
    }

    /// Classification accuracy on a batch; one query. Argmax ties resolve to
    /// the lowest class index.
    pub fn accuracy(
        &mut self,
        inputs: &Mat<T>,
        labels: &[usize],
        noise: &NoiseRealization<T>,
        ledger: &mut PowerLedger<T>,
    ) -> Result<T> {
        if inputs.rows() != labels.len() {
            return Err(CoreError::Argument(format!(
                "{} samples but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if inputs.rows() == 0 {
            return Err(CoreError::Argument("accuracy needs at least one sample".into()));
        }
        let logits = self.forward(inputs, noise, ledger)?;
        let mut correct = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if argmax(logits.row(r)) == label {
                correct += 1;
            }
        }
        Ok(T::c(correct as f64) / T::c(labels.len() as f64))
    }
}

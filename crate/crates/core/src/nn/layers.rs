use crate::tensor::{concat_cols, Real, Result, Tensor, TensorError, Var};

use super::params::{Ctx, ParamBuilder, ParamId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = pb.xavier("weight", &[in_dim, out_dim], in_dim, out_dim);
        let b = bias.then(|| pb.zeros("bias", &[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let y = x.matmul(&cx.p(self.w))?;
        match self.b {
            Some(b) => y.add(&cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, vocab: usize, dim: usize) -> Self {
        let table = pb.normal("table", &[vocab, dim], 0.02);
        Self { table, vocab, dim }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, ids: &[usize]) -> Result<Var<'t, F>> {
        cx.p(self.table).gather_rows(ids)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, dim: usize) -> Self {
        Self {
            gamma: pb.ones("gamma", &[dim]),
            beta: pb.zeros("beta", &[dim]),
        }
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.normalize(F::of(LAYER_NORM_EPS))
            .mul(&cx.p(self.gamma))?
            .add(&cx.p(self.beta))
    }
}

/// Shape of a same-padded 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size: 11,
            stride: 1,
            bias: true,
        }
    }

    pub fn kernel(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(TensorError::Invalid(format!(
                "conv kernel must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(TensorError::Invalid(format!(
                "conv stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        Ok(())
    }

    /// Output length `ceil(T / stride)`.
    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub spec: Conv1dSpec,
    w: ParamId,
    b: Option<ParamId>,
}

impl Conv1d {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, spec: Conv1dSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.kernel_size * spec.in_channels;
        let w = pb.xavier("weight", &[fan_in, spec.out_channels], fan_in, spec.out_channels);
        let b = spec.bias.then(|| pb.zeros("bias", &[spec.out_channels]));
        Ok(Self { spec, w, b })
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.spec.in_channels {
            return Err(TensorError::Shape {
                op: "conv1d channels",
                lhs: shape,
                rhs: vec![self.spec.in_channels],
            });
        }
        let y = x.conv1d(&cx.p(self.w), self.spec.kernel_size, self.spec.stride)?;
        match self.b {
            Some(b) => y.add(&cx.p(b)),
            None => Ok(y),
        }
    }
}

/// Sinusoidal positional encoding: `sin` on even columns, `cos` on odd.
pub fn positional_encoding<F: Real>(len: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(TensorError::Invalid(format!(
            "positional encoding needs an even dimension, got {dim}"
        )));
    }
    if len == 0 {
        return Err(TensorError::Invalid("positional encoding of length 0".into()));
    }
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = (10000f64).powf(-((2 * i) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_f64(&[len, dim], &data)
}

pub fn add_positional<'t, F: Real>(x: Var<'t, F>) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let pe = x.tape().constant(positional_encoding(shape[0], shape[1])?);
    x.add(&pe)
}

/// Key index receiving the diagonal bias for query row `i`.
pub fn diagonal_key(i: usize, tq: usize, tk: usize) -> usize {
    i * tk / tq
}

/// Additive attention bias with `value` at `[i, floor(i * tk / tq)]`.
pub fn diagonal_bias<F: Real>(tq: usize, tk: usize, value: f64) -> Tensor<F> {
    let mut t = Tensor::zeros(&[tq, tk]);
    for i in 0..tq {
        t.data_mut()[i * tk + diagonal_key(i, tq, tk)] = F::of(value);
    }
    t
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Invalid(format!(
                "hidden dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut pb.sub("q"), dim, dim, true),
            k: Linear::new(&mut pb.sub("k"), dim, dim, true),
            v: Linear::new(&mut pb.sub("v"), dim, dim, true),
            o: Linear::new(&mut pb.sub("o"), dim, dim, true),
            heads,
            dim,
        })
    }

    /// Output projection, exposed for residual-identity checks.
    pub fn output(&self) -> &Linear {
        &self.o
    }

    pub fn forward<'t, F: Real>(
        &self,
        cx: &Ctx<'t, '_, F>,
        query: Var<'t, F>,
        memory: Var<'t, F>,
        diagonal: Option<f64>,
    ) -> Result<Var<'t, F>> {
        Ok(self.forward_with_weights(cx, query, memory, diagonal)?.0)
    }

    /// Attention output plus the per-head weight matrices [Tq x Tk].
    pub fn forward_with_weights<'t, F: Real>(
        &self,
        cx: &Ctx<'t, '_, F>,
        query: Var<'t, F>,
        memory: Var<'t, F>,
        diagonal: Option<f64>,
    ) -> Result<(Var<'t, F>, Vec<Var<'t, F>>)> {
        let (qs, ks) = (query.shape(), memory.shape());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.dim || ks[1] != self.dim {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let (tq, tk) = (qs[0], ks[0]);
        let q = self.q.forward(cx, query)?;
        let k = self.k.forward(cx, memory)?;
        let v = self.v.forward(cx, memory)?;
        let dh = self.dim / self.heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let bias = diagonal.map(|b| cx.tape.constant(diagonal_bias(tq, tk, b)));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice_cols(lo, hi)?, k.slice_cols(lo, hi)?, v.slice_cols(lo, hi)?)
            };
            let mut energy = qh.matmul_t(&kh, false, true)?.scale(scale);
            if let Some(b) = &bias {
                energy = energy.add(b)?;
            }
            let w = energy.softmax(1)?;
            outs.push(w.matmul(&vh)?);
            weights.push(w);
        }
        let merged = if outs.len() == 1 { outs[0] } else { concat_cols(&outs)? };
        Ok((self.o.forward(cx, merged)?, weights))
    }
}

/// Layer counts and widths of a Transformer stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerSpec {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_dim: usize,
    pub feedforward_dim: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(TensorError::Invalid(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(TensorError::Invalid("hidden dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, dim: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(&mut pb.sub("l1"), dim, hidden, true),
            l2: Linear::new(&mut pb.sub("l2"), hidden, dim, true),
        }
    }

    pub fn output(&self) -> &Linear {
        &self.l2
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, x: Var<'t, F>, dropout: f64) -> Result<Var<'t, F>> {
        let h = self.l1.forward(cx, x)?.relu();
        let h = cx.dropout(h, dropout);
        self.l2.forward(cx, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    ln2: LayerNorm,
    pub ff: FeedForward,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, spec: &TransformerSpec) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.sub("ln1"), spec.hidden_dim),
            attn: MultiHeadAttention::new(&mut pb.sub("self_attn"), spec.hidden_dim, spec.heads)?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), spec.hidden_dim),
            ff: FeedForward::new(&mut pb.sub("ff"), spec.hidden_dim, spec.feedforward_dim),
            dropout: spec.dropout,
        })
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.ln1.forward(cx, x)?;
        let a = self.attn.forward(cx, h, h, None)?;
        let x = x.add(&cx.dropout(a, self.dropout))?;
        let h = self.ln2.forward(cx, x)?;
        let f = self.ff.forward(cx, h, self.dropout)?;
        x.add(&cx.dropout(f, self.dropout))
    }
}

/// Pre-norm block: unmasked self-attention, diagonally biased
/// cross-attention onto the memory, then feedforward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    pub ff: FeedForward,
    dropout: f64,
}

impl DecoderLayer {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, spec: &TransformerSpec) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut pb.sub("ln1"), spec.hidden_dim),
            self_attn: MultiHeadAttention::new(&mut pb.sub("self_attn"), spec.hidden_dim, spec.heads)?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), spec.hidden_dim),
            cross_attn: MultiHeadAttention::new(&mut pb.sub("cross_attn"), spec.hidden_dim, spec.heads)?,
            ln3: LayerNorm::new(&mut pb.sub("ln3"), spec.hidden_dim),
            ff: FeedForward::new(&mut pb.sub("ff"), spec.hidden_dim, spec.feedforward_dim),
            dropout: spec.dropout,
        })
    }

    pub fn forward<'t, F: Real>(
        &self,
        cx: &Ctx<'t, '_, F>,
        x: Var<'t, F>,
        memory: Var<'t, F>,
        diagonal: Option<f64>,
    ) -> Result<Var<'t, F>> {
        let h = self.ln1.forward(cx, x)?;
        let a = self.self_attn.forward(cx, h, h, None)?;
        let x = x.add(&cx.dropout(a, self.dropout))?;
        let h = self.ln2.forward(cx, x)?;
        let c = self.cross_attn.forward(cx, h, memory, diagonal)?;
        let x = x.add(&cx.dropout(c, self.dropout))?;
        let h = self.ln3.forward(cx, x)?;
        let f = self.ff.forward(cx, h, self.dropout)?;
        x.add(&cx.dropout(f, self.dropout))
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<F: Real>(pb: &mut ParamBuilder<'_, F>, spec: &TransformerSpec, layers: usize) -> Result<Self> {
        spec.validate()?;
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(&mut pb.sub(&format!("layer{i}")), spec))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(&mut pb.sub("norm"), spec.hidden_dim),
        })
    }

    pub fn forward<'t, F: Real>(&self, cx: &Ctx<'t, '_, F>, mut x: Var<'t, F>) -> Result<Var<'t, F>> {
        for layer in &self.layers {
            x = layer.forward(cx, x)?;
        }
        self.norm.forward(cx, x)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    pub diagonal_bias: Option<f64>,
}

impl TransformerDecoder {
    pub fn new<F: Real>(
        pb: &mut ParamBuilder<'_, F>,
        spec: &TransformerSpec,
        layers: usize,
        diagonal_bias: Option<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(&mut pb.sub(&format!("layer{i}")), spec))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(&mut pb.sub("norm"), spec.hidden_dim),
            diagonal_bias,
        })
    }

    pub fn forward<'t, F: Real>(
        &self,
        cx: &Ctx<'t, '_, F>,
        mut x: Var<'t, F>,
        memory: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        for layer in &self.layers {
            x = layer.forward(cx, x, memory, self.diagonal_bias)?;
        }
        self.norm.forward(cx, x)
    }
}

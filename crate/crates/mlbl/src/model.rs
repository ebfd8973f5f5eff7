//! The factored word-embedding tensor model: parameters, attribute lookup
//! table, forward pass, exact NLL, hand-derived gradients, and the plain
//! log-bilinear baseline it reduces to.
//!
//! Words live in a V x K x D tensor decomposed through F factors as three
//! matrices; an attribute vector mixes the slices. The forward pass embeds
//! the context through the folded (attribute-independent) embedding, predicts
//! the next representation with per-position context matrices, gates it by
//! the attribute through the factor space, and scores the vocabulary.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TrainingExample, Vocabulary};
use crate::error::{Error, Result};

/// Model shape: K (word representation), F (factors), D (attribute vector),
/// and n-1 (context size).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub repr_dim: usize,
    pub factor_dim: usize,
    pub attr_dim: usize,
    pub context_size: usize,
}

/// All trainable weights except the attribute lookup table.
///
/// `word_factors` and `bias` are per-language; `repr_factors`, `attr_factors`
/// and the context matrices are shared across languages.
#[derive(Debug, Clone)]
pub struct FactoredTensorParams {
    pub dims: ModelDims,
    /// F x K: couples predicted representations to factors.
    pub repr_factors: Array2<f64>,
    /// F x D: couples attribute vectors to factors.
    pub attr_factors: Array2<f64>,
    /// Per language, F x V_l: couples vocabulary words to factors.
    pub word_factors: Vec<Array2<f64>>,
    /// n-1 context matrices, each K x K.
    pub context_mats: Vec<Array2<f64>>,
    /// Per language, length V_l.
    pub bias: Vec<Array1<f64>>,
}

/// Attribute lookup table: one raw D-vector per attribute, with an optional
/// rectifier that keeps the effective vectors sparse and positive.
#[derive(Debug, Clone)]
pub struct AttributeTable {
    /// D x A, one column per attribute.
    pub columns: Array2<f64>,
    pub rectifier: bool,
}

fn uniform2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| lo + (hi - lo) * rng.random::<f64>())
}

impl FactoredTensorParams {
    /// Seeded initialization: every weight uniform in (-0.01, 0.01),
    /// biases zero.
    pub fn init(dims: ModelDims, vocab_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let repr_factors = uniform2(&mut rng, dims.factor_dim, dims.repr_dim, -0.01, 0.01);
        let attr_factors = uniform2(&mut rng, dims.factor_dim, dims.attr_dim, -0.01, 0.01);
        let word_factors = vocab_sizes
            .iter()
            .map(|&v| uniform2(&mut rng, dims.factor_dim, v, -0.01, 0.01))
            .collect();
        let context_mats = (0..dims.context_size)
            .map(|_| uniform2(&mut rng, dims.repr_dim, dims.repr_dim, -0.01, 0.01))
            .collect();
        let bias = vocab_sizes.iter().map(|&v| Array1::zeros(v)).collect();
        FactoredTensorParams {
            dims,
            repr_factors,
            attr_factors,
            word_factors,
            context_mats,
            bias,
        }
    }

    pub fn num_languages(&self) -> usize {
        self.word_factors.len()
    }

    pub fn vocab_size(&self, language: u32) -> usize {
        self.word_factors[language as usize].ncols()
    }

    /// Sets a language's bias to smoothed log unigram frequency,
    /// `ln((count_i + 1) / (total + V))`.
    pub fn set_bias_from_counts(&mut self, language: u32, counts: &[usize]) -> Result<()> {
        let v = self.vocab_size(language);
        if counts.len() != v {
            return Err(Error::DimensionMismatch {
                what: "unigram counts",
                expected: v,
                got: counts.len(),
            });
        }
        let total: usize = counts.iter().sum();
        let denom = (total + v) as f64;
        self.bias[language as usize] =
            Array1::from_iter(counts.iter().map(|&c| ((c + 1) as f64 / denom).ln()));
        Ok(())
    }

    /// Initializes word representations from pretrained K'-dim vectors by
    /// folding: `repr_factors` becomes identity-padded and each known word's
    /// factor column carries its file vector (truncated or zero-padded to F).
    pub fn import_embeddings(
        &mut self,
        language: u32,
        vocab: &Vocabulary,
        vectors: &HashMap<String, Vec<f64>>,
    ) -> usize {
        let (f_dim, k_dim) = (self.dims.factor_dim, self.dims.repr_dim);
        self.repr_factors = Array2::from_shape_fn((f_dim, k_dim), |(f, k)| {
            if f == k {
                1.0
            } else {
                0.0
            }
        });
        let wf = &mut self.word_factors[language as usize];
        let mut imported = 0;
        for (word, vec) in vectors {
            if let Some(id) = vocab.id(word) {
                let mut col = wf.column_mut(id as usize);
                for f in 0..f_dim {
                    col[f] = vec.get(f).copied().unwrap_or(0.0);
                }
                imported += 1;
            }
        }
        imported
    }

    /// The folded K x V embedding used for context words:
    /// `repr_factors^T * word_factors`.
    pub fn folded_embedding(&self, language: u32) -> Array2<f64> {
        self.repr_factors
            .t()
            .dot(&self.word_factors[language as usize])
    }

    /// Column `w` of the folded embedding, without materializing the matrix.
    pub fn folded_column(&self, language: u32, word: u32) -> Array1<f64> {
        self.repr_factors
            .t()
            .dot(&self.word_factors[language as usize].column(word as usize))
    }

    /// The attribute-conditioned V x K embedding for a mixing vector `x`:
    /// `word_factors^T * diag(attr_factors * x) * repr_factors`. Row `w` is
    /// word `w`'s representation under the attribute.
    pub fn conditioned_embedding(&self, x: &Array1<f64>, language: u32) -> Result<Array2<f64>> {
        if x.len() != self.dims.attr_dim {
            return Err(Error::DimensionMismatch {
                what: "attribute vector",
                expected: self.dims.attr_dim,
                got: x.len(),
            });
        }
        let gates = self.attr_factors.dot(x);
        let wf = &self.word_factors[language as usize];
        // (diag(gates) * repr_factors) computed row-wise, then V x F * F x K.
        let mut gated = self.repr_factors.clone();
        for (f, mut row) in gated.rows_mut().into_iter().enumerate() {
            row *= gates[f];
        }
        Ok(wf.t().dot(&gated))
    }

    /// One row of the conditioned embedding: `repr_factors^T *
    /// (gates . word_factors[:,w])` for precomputed `gates = attr_factors*x`.
    pub fn conditioned_row(&self, gates: &Array1<f64>, language: u32, word: u32) -> Array1<f64> {
        let col = self.word_factors[language as usize].column(word as usize);
        let gated = gates * &col;
        self.repr_factors.t().dot(&gated)
    }
}

impl AttributeTable {
    /// Seeded initialization: columns uniform in (0, 0.01) so the rectifier
    /// starts active.
    pub fn init(attr_dim: usize, num_attributes: usize, rectifier: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttributeTable {
            columns: uniform2(&mut rng, attr_dim, num_attributes, 0.0, 0.01),
            rectifier,
        }
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn attr_dim(&self) -> usize {
        self.columns.nrows()
    }

    fn check(&self, attribute: u32) -> Result<()> {
        if (attribute as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::InvalidId {
                what: "attribute",
                id: attribute,
                limit: self.len(),
            })
        }
    }

    /// Raw (pre-rectifier) column.
    pub fn raw_column(&self, attribute: u32) -> Result<ArrayView1<'_, f64>> {
        self.check(attribute)?;
        Ok(self.columns.column(attribute as usize))
    }

    /// Effective attribute vector: `max(0, column)` under the rectifier,
    /// the raw column otherwise.
    pub fn vector(&self, attribute: u32) -> Result<Array1<f64>> {
        let raw = self.raw_column(attribute)?;
        Ok(if self.rectifier {
            raw.mapv(|z| z.max(0.0))
        } else {
            raw.to_owned()
        })
    }

    /// Applies the table's rectifier to an external raw vector.
    pub fn rectify(&self, raw: &Array1<f64>) -> Array1<f64> {
        if self.rectifier {
            raw.mapv(|z| z.max(0.0))
        } else {
            raw.clone()
        }
    }
}

/// Everything the forward pass computes, with the intermediates backprop
/// needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Predicted next-word representation (K).
    pub predicted: Array1<f64>,
    /// Factor outputs: gated componentwise product (F).
    pub factors: Array1<f64>,
    pub logits: Array1<f64>,
    pub log_probs: Array1<f64>,
    /// Folded embedding of each context word (K each).
    pub context_embeds: Vec<Array1<f64>>,
    /// repr_factors * predicted (F).
    pub factor_repr: Array1<f64>,
    /// attr_factors * x (F).
    pub factor_attr: Array1<f64>,
    /// The (post-rectifier) attribute vector used (D).
    pub attr_vec: Array1<f64>,
}

pub fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.mapv(|l| (l - max).exp()).sum().ln();
    logits.mapv(|l| l - lse)
}

fn check_example(params: &FactoredTensorParams, example: &TrainingExample) -> Result<()> {
    if example.context.len() != params.dims.context_size {
        return Err(Error::DimensionMismatch {
            what: "context window",
            expected: params.dims.context_size,
            got: example.context.len(),
        });
    }
    if (example.language as usize) >= params.num_languages() {
        return Err(Error::InvalidId {
            what: "language",
            id: example.language,
            limit: params.num_languages(),
        });
    }
    let v = params.vocab_size(example.language);
    for &w in example.context.iter().chain(std::iter::once(&example.target)) {
        if (w as usize) >= v {
            return Err(Error::InvalidId {
                what: "word",
                id: w,
                limit: v,
            });
        }
    }
    Ok(())
}

/// Forward pass with the attribute vector looked up from the table.
pub fn forward(
    params: &FactoredTensorParams,
    table: &AttributeTable,
    example: &TrainingExample,
) -> Result<ForwardTrace> {
    let x = table.vector(example.attribute)?;
    forward_with_x(params, &x, example)
}

/// Forward pass with an explicit (post-rectifier) attribute vector.
pub fn forward_with_x(
    params: &FactoredTensorParams,
    x: &Array1<f64>,
    example: &TrainingExample,
) -> Result<ForwardTrace> {
    check_example(params, example)?;
    if x.len() != params.dims.attr_dim {
        return Err(Error::DimensionMismatch {
            what: "attribute vector",
            expected: params.dims.attr_dim,
            got: x.len(),
        });
    }
    let lang = example.language;
    let wf = &params.word_factors[lang as usize];

    let context_embeds: Vec<Array1<f64>> = example
        .context
        .iter()
        .map(|&w| params.folded_column(lang, w))
        .collect();
    let mut predicted = Array1::zeros(params.dims.repr_dim);
    for (mat, embed) in params.context_mats.iter().zip(&context_embeds) {
        predicted += &mat.dot(embed);
    }
    let factor_repr = params.repr_factors.dot(&predicted);
    let factor_attr = params.attr_factors.dot(x);
    let factors = &factor_repr * &factor_attr;
    let logits = wf.t().dot(&factors) + &params.bias[lang as usize];
    let log_probs = log_softmax(&logits);
    Ok(ForwardTrace {
        predicted,
        factors,
        logits,
        log_probs,
        context_embeds,
        factor_repr,
        factor_attr,
        attr_vec: x.clone(),
    })
}

/// Mean negative log-likelihood over a batch.
pub fn nll_loss<'a, I>(
    params: &FactoredTensorParams,
    table: &AttributeTable,
    batch: I,
) -> Result<f64>
where
    I: IntoIterator<Item = &'a TrainingExample>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for example in batch {
        let trace = forward(params, table, example)?;
        total -= trace.log_probs[example.target as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / count as f64)
}

/// Gradients (or any per-parameter-group buffer, e.g. momentum velocity)
/// shape-congruent with [`FactoredTensorParams`] plus the attribute table.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub repr_factors: Array2<f64>,
    pub attr_factors: Array2<f64>,
    pub word_factors: Vec<Array2<f64>>,
    pub context_mats: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
    /// D x A; columns of attributes absent from the batch stay zero.
    pub attr_columns: Array2<f64>,
}

impl Gradients {
    pub fn zeros(params: &FactoredTensorParams, table: &AttributeTable) -> Self {
        Gradients {
            repr_factors: Array2::zeros(params.repr_factors.raw_dim()),
            attr_factors: Array2::zeros(params.attr_factors.raw_dim()),
            word_factors: params
                .word_factors
                .iter()
                .map(|m| Array2::zeros(m.raw_dim()))
                .collect(),
            context_mats: params
                .context_mats
                .iter()
                .map(|m| Array2::zeros(m.raw_dim()))
                .collect(),
            bias: params
                .bias
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
            attr_columns: Array2::zeros(table.columns.raw_dim()),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|v| *v *= c);
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.for_each(|v| sq += v * v);
        sq.sqrt()
    }

    fn for_each(&self, mut f: impl FnMut(f64)) {
        self.repr_factors.iter().for_each(|&v| f(v));
        self.attr_factors.iter().for_each(|&v| f(v));
        self.word_factors
            .iter()
            .for_each(|m| m.iter().for_each(|&v| f(v)));
        self.context_mats
            .iter()
            .for_each(|m| m.iter().for_each(|&v| f(v)));
        self.bias.iter().for_each(|b| b.iter().for_each(|&v| f(v)));
        self.attr_columns.iter().for_each(|&v| f(v));
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.repr_factors.iter_mut().for_each(&mut f);
        self.attr_factors.iter_mut().for_each(&mut f);
        self.word_factors
            .iter_mut()
            .for_each(|m| m.iter_mut().for_each(&mut f));
        self.context_mats
            .iter_mut()
            .for_each(|m| m.iter_mut().for_each(&mut f));
        self.bias
            .iter_mut()
            .for_each(|b| b.iter_mut().for_each(&mut f));
        self.attr_columns.iter_mut().for_each(&mut f);
    }
}

/// acc += col * row^T
pub(crate) fn add_outer(acc: &mut Array2<f64>, col: ArrayView1<f64>, row: ArrayView1<f64>) {
    for (i, &c) in col.iter().enumerate() {
        if c != 0.0 {
            acc.row_mut(i).scaled_add(c, &row);
        }
    }
}

/// Exact analytic gradients of the mean batch NLL for every parameter group
/// and for the raw attribute columns of attributes present in the batch.
/// Returns the mean NLL alongside.
pub fn backward<'a, I>(
    params: &FactoredTensorParams,
    table: &AttributeTable,
    batch: I,
) -> Result<(f64, Gradients)>
where
    I: IntoIterator<Item = &'a TrainingExample>,
{
    let mut grads = Gradients::zeros(params, table);
    let mut total = 0.0;
    let mut count = 0usize;
    for example in batch {
        total += backward_into(params, table, example, &mut grads)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    grads.scale(1.0 / count as f64);
    Ok((total / count as f64, grads))
}

fn backward_into(
    params: &FactoredTensorParams,
    table: &AttributeTable,
    example: &TrainingExample,
    grads: &mut Gradients,
) -> Result<f64> {
    let trace = forward(params, table, example)?;
    let lang = example.language as usize;
    let wf = &params.word_factors[lang];
    let target = example.target as usize;
    let nll = -trace.log_probs[target];

    // d loss / d logits = softmax - onehot(target)
    let mut delta = trace.log_probs.mapv(f64::exp);
    delta[target] -= 1.0;

    grads.bias[lang] += &delta;
    // Output side of word_factors: column j accumulates delta_j * factors.
    add_outer(
        &mut grads.word_factors[lang],
        trace.factors.view(),
        delta.view(),
    );

    let d_factors = wf.dot(&delta);
    let d_factor_repr = &d_factors * &trace.factor_attr;
    let d_factor_attr = &d_factors * &trace.factor_repr;

    add_outer(
        &mut grads.attr_factors,
        d_factor_attr.view(),
        trace.attr_vec.view(),
    );

    // Raw attribute column through the rectifier gate.
    let d_attr_vec = params.attr_factors.t().dot(&d_factor_attr);
    let raw = table.raw_column(example.attribute)?;
    let mut col = grads.attr_columns.column_mut(example.attribute as usize);
    for (j, g) in d_attr_vec.iter().enumerate() {
        if !table.rectifier || raw[j] > 0.0 {
            col[j] += g;
        }
    }

    let d_predicted = params.repr_factors.t().dot(&d_factor_repr);
    add_outer(
        &mut grads.repr_factors,
        d_factor_repr.view(),
        trace.predicted.view(),
    );

    for (i, (mat, embed)) in params
        .context_mats
        .iter()
        .zip(&trace.context_embeds)
        .enumerate()
    {
        add_outer(
            &mut grads.context_mats[i],
            d_predicted.view(),
            embed.view(),
        );
        let d_embed = mat.t().dot(&d_predicted);
        // Context side: embed = repr_factors^T * word_factors[:, w_i].
        let w = example.context[i] as usize;
        let d_word_col = params.repr_factors.dot(&d_embed);
        grads.word_factors[lang]
            .column_mut(w)
            .scaled_add(1.0, &d_word_col);
        add_outer(
            &mut grads.repr_factors,
            wf.column(w),
            d_embed.view(),
        );
    }
    Ok(nll)
}

/// The plain log-bilinear baseline: given a V x K representation matrix, the
/// context matrices and a bias, returns the next-word log-probabilities.
pub fn lbl_forward(
    word_reprs: &Array2<f64>,
    context_mats: &[Array2<f64>],
    bias: &Array1<f64>,
    context: &[u32],
) -> Result<Array1<f64>> {
    if context.len() != context_mats.len() {
        return Err(Error::DimensionMismatch {
            what: "context window",
            expected: context_mats.len(),
            got: context.len(),
        });
    }
    let v = word_reprs.nrows();
    if bias.len() != v {
        return Err(Error::DimensionMismatch {
            what: "bias",
            expected: v,
            got: bias.len(),
        });
    }
    let k = word_reprs.ncols();
    let mut predicted = Array1::zeros(k);
    for (mat, &w) in context_mats.iter().zip(context) {
        if (w as usize) >= v {
            return Err(Error::InvalidId {
                what: "word",
                id: w,
                limit: v,
            });
        }
        if mat.nrows() != k || mat.ncols() != k {
            return Err(Error::DimensionMismatch {
                what: "context matrix",
                expected: k,
                got: mat.nrows(),
            });
        }
        predicted += &mat.dot(&word_reprs.row(w as usize));
    }
    let logits = word_reprs.dot(&predicted) + bias;
    Ok(log_softmax(&logits))
}

/// Name of the first parameter group containing a non-finite value, if any.
pub fn first_non_finite(params: &FactoredTensorParams, table: &AttributeTable) -> Option<String> {
    let finite = |m: &Array2<f64>| m.iter().all(|v| v.is_finite());
    if !finite(&params.repr_factors) {
        return Some("repr_factors".into());
    }
    if !finite(&params.attr_factors) {
        return Some("attr_factors".into());
    }
    for (l, m) in params.word_factors.iter().enumerate() {
        if !finite(m) {
            return Some(format!("word_factors[{l}]"));
        }
    }
    for (i, m) in params.context_mats.iter().enumerate() {
        if !finite(m) {
            return Some(format!("context_mats[{i}]"));
        }
    }
    for (l, b) in params.bias.iter().enumerate() {
        if !b.iter().all(|v| v.is_finite()) {
            return Some(format!("bias[{l}]"));
        }
    }
    if !finite(&table.columns) {
        return Some("attribute_table".into());
    }
    None
}

/// Applies `f(theta, grad, velocity)` to every scalar parameter slot across
/// the model and the attribute table, in a fixed deterministic order.
pub fn zip_params_apply(
    params: &mut FactoredTensorParams,
    table: &mut AttributeTable,
    grads: &Gradients,
    velocity: &mut Gradients,
    mut f: impl FnMut(&mut f64, f64, &mut f64),
) {
    fn zip2(
        p: &mut Array2<f64>,
        g: &Array2<f64>,
        v: &mut Array2<f64>,
        f: &mut impl FnMut(&mut f64, f64, &mut f64),
    ) {
        for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            f(p, g, v);
        }
    }
    zip2(
        &mut params.repr_factors,
        &grads.repr_factors,
        &mut velocity.repr_factors,
        &mut f,
    );
    zip2(
        &mut params.attr_factors,
        &grads.attr_factors,
        &mut velocity.attr_factors,
        &mut f,
    );
    for l in 0..params.word_factors.len() {
        zip2(
            &mut params.word_factors[l],
            &grads.word_factors[l],
            &mut velocity.word_factors[l],
            &mut f,
        );
    }
    for i in 0..params.context_mats.len() {
        zip2(
            &mut params.context_mats[i],
            &grads.context_mats[i],
            &mut velocity.context_mats[i],
            &mut f,
        );
    }
    for l in 0..params.bias.len() {
        for ((p, &g), v) in params.bias[l]
            .iter_mut()
            .zip(grads.bias[l].iter())
            .zip(velocity.bias[l].iter_mut())
        {
            f(p, g, v);
        }
    }
    zip2(
        &mut table.columns,
        &grads.attr_columns,
        &mut velocity.attr_columns,
        &mut f,
    );
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_bytes(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(FNV_PRIME);
    }
}

fn fnv_floats<'a>(hash: &mut u64, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        fnv_bytes(hash, &v.to_le_bytes());
    }
}

/// FNV-1a checksum over every weight, in a fixed order. Stable across runs;
/// used to verify parameters were not mutated.
pub fn params_checksum(params: &FactoredTensorParams) -> u64 {
    let mut h = FNV_OFFSET;
    fnv_floats(&mut h, params.repr_factors.iter());
    fnv_floats(&mut h, params.attr_factors.iter());
    for m in &params.word_factors {
        fnv_floats(&mut h, m.iter());
    }
    for m in &params.context_mats {
        fnv_floats(&mut h, m.iter());
    }
    for b in &params.bias {
        fnv_floats(&mut h, b.iter());
    }
    h
}

pub fn table_checksum(table: &AttributeTable) -> u64 {
    let mut h = FNV_OFFSET;
    fnv_floats(&mut h, table.columns.iter());
    fnv_bytes(&mut h, &[table.rectifier as u8]);
    h
}

//! Decoder-only transformer with pre-norm residual blocks.
//!
//! Each block is causal multi-head attention followed by a GELU MLP. Norms
//! are parameter-free RMSNorm and the output head is tied to the token
//! embedding. Adapters attach to the four attention matrices of every layer,
//! all of shape (k × k).

use std::path::Path;

use crate::adapter::{AdapterCheckpoint, AdapterModule, MatrixRole, SiteId};
use crate::ckpt::{self, MetaLines, BASE_MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
/// First id that is not reserved.
pub const FIRST_CONTENT: u32 = 2;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniLmConfig {
    pub vocab_size: usize,
    /// Model dimension `k`.
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq_len: usize,
    pub mlp_dim: usize,
    pub seed: u64,
}

impl Default for MiniLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 32,
            heads: 4,
            layers: 2,
            max_seq_len: 32,
            mlp_dim: 64,
            seed: 0,
        }
    }
}

impl MiniLmConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size <= FIRST_CONTENT as usize {
            return bad(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.model_dim == 0 || self.heads == 0 || self.layers == 0 || self.mlp_dim == 0 {
            return bad("model_dim, heads, layers and mlp_dim must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        Ok(())
    }

    /// Per-head dimension `d`.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    pub attention: [Matrix; 4],
    pub mlp_in: Matrix,
    pub mlp_out: Matrix,
}

fn role_index(role: MatrixRole) -> usize {
    match role {
        MatrixRole::Key => 0,
        MatrixRole::Query => 1,
        MatrixRole::Value => 2,
        MatrixRole::Projection => 3,
    }
}

const KEY: usize = 0;
const QUERY: usize = 1;
const VALUE: usize = 2;
const PROJECTION: usize = 3;

/// Frozen base model. Immutable once built; the fingerprint is computed at
/// construction from the weight bytes.
#[derive(Debug, Clone)]
pub struct MiniLm {
    config: MiniLmConfig,
    embedding: Matrix,
    position: Matrix,
    layers: Vec<Layer>,
    fingerprint: String,
}

/// How adapter deltas enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdapterPath {
    /// `W·x + Δ·x`, with `Δ·x` evaluated through the factors.
    #[default]
    OnTheFly,
    /// `(W + Δ)·x` with the delta folded in first.
    Merged,
}

impl MiniLm {
    pub fn new(config: MiniLmConfig) -> Result<Self> {
        config.validate()?;
        let k = config.model_dim;
        let seed = config.seed;
        let attn_std = 1.0 / (k as f64).sqrt();
        let embedding = Matrix::seeded_normal(config.vocab_size, k, SplitMix64::derive(seed, 1).next_u64(), 1.0);
        let position = Matrix::seeded_normal(config.max_seq_len, k, SplitMix64::derive(seed, 2).next_u64(), 0.5);
        let layers = (0..config.layers)
            .map(|l| {
                let s = |j: u64| SplitMix64::derive(seed, 16 + 8 * l as u64 + j).next_u64();
                Layer {
                    attention: [0, 1, 2, 3].map(|j| Matrix::seeded_normal(k, k, s(j), attn_std)),
                    mlp_in: Matrix::seeded_normal(config.mlp_dim, k, s(4), attn_std),
                    mlp_out: Matrix::seeded_normal(k, config.mlp_dim, s(5), 1.0 / (config.mlp_dim as f64).sqrt()),
                }
            })
            .collect();
        Ok(Self::assemble(config, embedding, position, layers))
    }

    fn assemble(config: MiniLmConfig, embedding: Matrix, position: Matrix, layers: Vec<Layer>) -> Self {
        let mut m = Self {
            config,
            embedding,
            position,
            layers,
            fingerprint: String::new(),
        };
        m.fingerprint = ckpt::fingerprint(&m.payload_bytes());
        m
    }

    pub fn config(&self) -> &MiniLmConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding, &self.position];
        for l in &self.layers {
            out.extend(l.attention.iter());
            out.push(&l.mlp_in);
            out.push(&l.mlp_out);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    fn payload_bytes(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|m| m.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Every adapter attachment site with its (out, in) shape.
    pub fn site_shapes(&self) -> Vec<(SiteId, (usize, usize))> {
        let k = self.config.model_dim;
        (0..self.config.layers)
            .flat_map(|l| MatrixRole::ALL.iter().map(move |&r| (SiteId::new(l, r), (k, k))))
            .collect()
    }

    pub fn site_weight(&self, site: &SiteId) -> Option<&Matrix> {
        self.layers.get(site.layer).map(|l| &l.attention[role_index(site.role)])
    }

    /// Checks that an adapter was trained against this exact base and binds to
    /// existing sites.
    pub fn check_adapter(&self, adapter: &AdapterCheckpoint) -> Result<()> {
        let mut problems = Vec::new();
        if adapter.meta.base_model_fingerprint != self.fingerprint {
            problems.push(format!(
                "adapter base fingerprint {} does not match model {}",
                adapter.meta.base_model_fingerprint, self.fingerprint
            ));
        }
        let k = self.config.model_dim;
        for (site, module) in adapter.modules() {
            if site.layer >= self.config.layers {
                problems.push(format!("site {site} beyond the model's {} layers", self.config.layers));
            } else if module.delta_shape() != (k, k) {
                problems.push(format!("site {site}: delta {:?} does not fit ({k}, {k})", module.delta_shape()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(problems))
        }
    }

    /// Folds an adapter into the base weights, yielding a new base model.
    pub fn merge(&self, adapter: &AdapterCheckpoint) -> Result<MiniLm> {
        self.check_adapter(adapter)?;
        let mut layers = self.layers.clone();
        for (site, module) in adapter.modules() {
            let w = &mut layers[site.layer].attention[role_index(site.role)];
            *w = module.apply_to_weights(w)?;
        }
        Ok(Self::assemble(self.config.clone(), self.embedding.clone(), self.position.clone(), layers))
    }

    pub(crate) fn resolve<'a>(&'a self, adapter: Option<&'a AdapterCheckpoint>, path: AdapterPath) -> Result<Resolved<'a>> {
        if let Some(a) = adapter {
            self.check_adapter(a)?;
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut ops = Vec::with_capacity(4);
            for (j, &role) in [MatrixRole::Key, MatrixRole::Query, MatrixRole::Value, MatrixRole::Projection]
                .iter()
                .enumerate()
            {
                let base = &layer.attention[j];
                let module = adapter.and_then(|a| a.module(&SiteId::new(l, role)));
                ops.push(match (module, path) {
                    (None, _) => SiteOp::Base(base),
                    (Some(m), AdapterPath::OnTheFly) => SiteOp::Adapted(base, m),
                    (Some(m), AdapterPath::Merged) => SiteOp::Owned(m.apply_to_weights(base)?),
                });
            }
            layers.push(ops);
        }
        Ok(Resolved { layers })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Per-position logits, shape (len × vocab).
    pub fn forward_logits(&self, adapter: Option<&AdapterCheckpoint>, tokens: &[u32], path: AdapterPath) -> Result<Matrix> {
        let w = self.resolve(adapter, path)?;
        self.check_tokens(tokens)?;
        let trace = self.run(&w, tokens);
        Matrix::from_vec(tokens.len(), self.config.vocab_size, trace.logits)
    }

    /// Per-position vocabulary log-probabilities, shape (len × vocab).
    pub fn forward(&self, adapter: Option<&AdapterCheckpoint>, tokens: &[u32]) -> Result<Matrix> {
        let logits = self.forward_logits(adapter, tokens, AdapterPath::OnTheFly)?;
        let v = self.config.vocab_size;
        let mut data = logits.into_data();
        for row in data.chunks_mut(v) {
            log_softmax_in_place(row);
        }
        Matrix::from_vec(tokens.len(), v, data)
    }

    pub(crate) fn run(&self, w: &Resolved<'_>, tokens: &[u32]) -> Trace {
        let cfg = &self.config;
        let (k, t_len, heads, dh, m) = (cfg.model_dim, tokens.len(), cfg.heads, cfg.head_dim(), cfg.mlp_dim);
        let mut x = vec![0.0; t_len * k];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.embedding.row(tok as usize);
            let p = self.position.row(t);
            for i in 0..k {
                x[t * k + i] = e[i] + p[i];
            }
        }
        let att_scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, ops) in self.layers.iter().zip(&w.layers) {
            let x_in = x.clone();
            let (n1, r1) = rms_norm_rows(&x_in, k);
            let mut q = vec![0.0; t_len * k];
            let mut kk = vec![0.0; t_len * k];
            let mut v = vec![0.0; t_len * k];
            for t in 0..t_len {
                let src = &n1[t * k..(t + 1) * k];
                ops[QUERY].apply(src, &mut q[t * k..(t + 1) * k]);
                ops[KEY].apply(src, &mut kk[t * k..(t + 1) * k]);
                ops[VALUE].apply(src, &mut v[t * k..(t + 1) * k]);
            }
            let mut att = vec![0.0; heads * t_len * t_len];
            let mut o = vec![0.0; t_len * k];
            for h in 0..heads {
                let off = h * dh;
                for t in 0..t_len {
                    let row = &mut att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    for s in 0..=t {
                        row[s] = att_scale * dot(&q[t * k + off..t * k + off + dh], &kk[s * k + off..s * k + off + dh]);
                    }
                    softmax_in_place(&mut row[..=t]);
                    for s in 0..=t {
                        let a = row[s];
                        for i in 0..dh {
                            o[t * k + off + i] += a * v[s * k + off + i];
                        }
                    }
                }
            }
            let mut attn_out = vec![0.0; k];
            for t in 0..t_len {
                ops[PROJECTION].apply(&o[t * k..(t + 1) * k], &mut attn_out);
                for i in 0..k {
                    x[t * k + i] += attn_out[i];
                }
            }
            let x_mid = x.clone();
            let (n2, r2) = rms_norm_rows(&x_mid, k);
            let mut u = vec![0.0; t_len * m];
            let mut g = vec![0.0; t_len * m];
            let mut mlp = vec![0.0; k];
            for t in 0..t_len {
                matvec(&layer.mlp_in, &n2[t * k..(t + 1) * k], &mut u[t * m..(t + 1) * m]);
                for j in 0..m {
                    g[t * m + j] = gelu(u[t * m + j]);
                }
                matvec(&layer.mlp_out, &g[t * m..(t + 1) * m], &mut mlp);
                for i in 0..k {
                    x[t * k + i] += mlp[i];
                }
            }
            layers.push(LayerTrace {
                x_in,
                n1,
                r1,
                q,
                k: kk,
                v,
                att,
                o,
                x_mid,
                n2,
                r2,
                u,
                g,
            });
        }
        let (nf, rf) = rms_norm_rows(&x, k);
        let vocab = cfg.vocab_size;
        let out_scale = 1.0 / (k as f64).sqrt();
        let mut logits = vec![0.0; t_len * vocab];
        for t in 0..t_len {
            let h = &nf[t * k..(t + 1) * k];
            for tok in 0..vocab {
                logits[t * vocab + tok] = out_scale * dot(self.embedding.row(tok), h);
            }
        }
        Trace {
            layers,
            x_out: x,
            rf,
            logits,
        }
    }

    /// Back-propagates `dlogits` (len × vocab) to the effective attention
    /// weights, returning `∂L/∂W` per layer in [key, query, value, projection]
    /// order. `w` must be a merged or adapter-free resolution.
    pub(crate) fn backward(&self, w: &Resolved<'_>, trace: &Trace, dlogits: &[f64], grads: &mut [[Matrix; 4]]) {
        let cfg = &self.config;
        let (k, heads, dh, m, vocab) = (cfg.model_dim, cfg.heads, cfg.head_dim(), cfg.mlp_dim, cfg.vocab_size);
        let t_len = trace.rf.len();
        let out_scale = 1.0 / (k as f64).sqrt();
        let att_scale = 1.0 / (dh as f64).sqrt();

        let mut dnf = vec![0.0; t_len * k];
        for t in 0..t_len {
            for tok in 0..vocab {
                let d = dlogits[t * vocab + tok];
                if d != 0.0 {
                    let e = self.embedding.row(tok);
                    for i in 0..k {
                        dnf[t * k + i] += out_scale * d * e[i];
                    }
                }
            }
        }
        let mut dx = vec![0.0; t_len * k];
        rms_norm_backward(&trace.x_out, &trace.rf, &dnf, k, &mut dx);

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let lt = &trace.layers[l];
            let ops = &w.layers[l];
            let g_sites = &mut grads[l];

            let mut dn2 = vec![0.0; t_len * k];
            let mut dg = vec![0.0; m];
            for t in 0..t_len {
                dg.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_acc(&layer.mlp_out, &dx[t * k..(t + 1) * k], &mut dg);
                for j in 0..m {
                    dg[j] *= gelu_grad(lt.u[t * m + j]);
                }
                matvec_t_acc(&layer.mlp_in, &dg, &mut dn2[t * k..(t + 1) * k]);
            }
            rms_norm_backward(&lt.x_mid, &lt.r2, &dn2, k, &mut dx);

            let mut d_o = vec![0.0; t_len * k];
            for t in 0..t_len {
                let dy = &dx[t * k..(t + 1) * k];
                outer_acc(&mut g_sites[PROJECTION], dy, &lt.o[t * k..(t + 1) * k]);
                matvec_t_acc(ops[PROJECTION].matrix(), dy, &mut d_o[t * k..(t + 1) * k]);
            }
            let mut dq = vec![0.0; t_len * k];
            let mut dkk = vec![0.0; t_len * k];
            let mut dv = vec![0.0; t_len * k];
            let mut da = vec![0.0; t_len];
            for h in 0..heads {
                let off = h * dh;
                for t in 0..t_len {
                    let a = &lt.att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let dot_t = &d_o[t * k + off..t * k + off + dh];
                    for s in 0..=t {
                        da[s] = dot(dot_t, &lt.v[s * k + off..s * k + off + dh]);
                        for i in 0..dh {
                            dv[s * k + off + i] += a[s] * dot_t[i];
                        }
                    }
                    let mean: f64 = (0..=t).map(|s| a[s] * da[s]).sum();
                    for s in 0..=t {
                        let ds = a[s] * (da[s] - mean) * att_scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for i in 0..dh {
                            dq[t * k + off + i] += ds * lt.k[s * k + off + i];
                            dkk[s * k + off + i] += ds * lt.q[t * k + off + i];
                        }
                    }
                }
            }
            let mut dn1 = vec![0.0; t_len * k];
            for t in 0..t_len {
                let n1 = &lt.n1[t * k..(t + 1) * k];
                let dst = &mut dn1[t * k..(t + 1) * k];
                for (idx, d) in [(QUERY, &dq), (KEY, &dkk), (VALUE, &dv)] {
                    let dy = &d[t * k..(t + 1) * k];
                    outer_acc(&mut g_sites[idx], dy, n1);
                    matvec_t_acc(ops[idx].matrix(), dy, dst);
                }
            }
            rms_norm_backward(&lt.x_in, &lt.r1, &dn1, k, &mut dx);
        }
    }

    pub(crate) fn zero_site_grads(&self) -> Vec<[Matrix; 4]> {
        let k = self.config.model_dim;
        (0..self.config.layers).map(|_| [0, 1, 2, 3].map(|_| Matrix::zeros(k, k))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut meta = MetaLines::default();
        meta.push("vocab_size", c.vocab_size);
        meta.push("model_dim", c.model_dim);
        meta.push("heads", c.heads);
        meta.push("layers", c.layers);
        meta.push("max_seq_len", c.max_seq_len);
        meta.push("mlp_dim", c.mlp_dim);
        meta.push("seed", c.seed);
        meta.push("dtype", "f64");
        meta.push("fingerprint", &self.fingerprint);
        ckpt::encode_container(BASE_MODEL_MAGIC, &meta.render(), &self.payload_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (text, payload) = ckpt::decode_container(BASE_MODEL_MAGIC, bytes)?;
        let meta = MetaLines::parse(&text)?;
        if meta.require("dtype")? != "f64" {
            return Err(Error::Consistency(format!("unsupported base dtype {}", meta.require("dtype")?)));
        }
        let config = MiniLmConfig {
            vocab_size: meta.parse_value("vocab_size")?,
            model_dim: meta.parse_value("model_dim")?,
            heads: meta.parse_value("heads")?,
            layers: meta.parse_value("layers")?,
            max_seq_len: meta.parse_value("max_seq_len")?,
            mlp_dim: meta.parse_value("mlp_dim")?,
            seed: meta.parse_value("seed")?,
        };
        config.validate().map_err(|e| Error::Consistency(e.to_string()))?;
        let values = ckpt::f64_values(payload)?;
        let (v, k, t, mlp) = (config.vocab_size, config.model_dim, config.max_seq_len, config.mlp_dim);
        let expected = v * k + t * k + config.layers * (4 * k * k + 2 * mlp * k);
        if values.len() != expected {
            return Err(Error::Consistency(format!(
                "payload holds {} values, configuration needs {expected}",
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("base model payload".into()));
        }
        let mut rest = values.as_slice();
        let mut take = |rows: usize, cols: usize| {
            let (head, tail) = rest.split_at(rows * cols);
            rest = tail;
            Matrix::from_vec(rows, cols, head.to_vec())
        };
        let embedding = take(v, k)?;
        let position = take(t, k)?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attention = [take(k, k)?, take(k, k)?, take(k, k)?, take(k, k)?];
            let mlp_in = take(mlp, k)?;
            let mlp_out = take(k, mlp)?;
            layers.push(Layer {
                attention,
                mlp_in,
                mlp_out,
            });
        }
        let model = Self::assemble(config, embedding, position, layers);
        if let Some(stated) = meta.get("fingerprint") {
            if stated != model.fingerprint {
                return Err(Error::Consistency("stated fingerprint does not match payload".into()));
            }
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        ckpt::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) enum SiteOp<'a> {
    Base(&'a Matrix),
    Owned(Matrix),
    Adapted(&'a Matrix, &'a AdapterModule),
}

impl SiteOp<'_> {
    /// `y = W_eff · x`, overwriting `y`.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        match self {
            SiteOp::Base(w) => matvec(w, x, y),
            SiteOp::Owned(w) => matvec(w, x, y),
            SiteOp::Adapted(w, module) => {
                matvec(w, x, y);
                delta_apply_acc(module, x, y);
            }
        }
    }

    fn matrix(&self) -> &Matrix {
        match self {
            SiteOp::Base(w) => w,
            SiteOp::Owned(w) => w,
            SiteOp::Adapted(..) => unreachable!("backward runs on merged weights"),
        }
    }
}

pub(crate) struct Resolved<'a> {
    layers: Vec<Vec<SiteOp<'a>>>,
}

pub(crate) struct LayerTrace {
    x_in: Vec<f64>,
    n1: Vec<f64>,
    r1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    #[allow(dead_code)]
    n2: Vec<f64>,
    r2: Vec<f64>,
    u: Vec<f64>,
    #[allow(dead_code)]
    g: Vec<f64>,
}

pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    x_out: Vec<f64>,
    rf: Vec<f64>,
    pub logits: Vec<f64>,
}

/// `y += Δ·x` without materializing `Δ`.
fn delta_apply_acc(module: &AdapterModule, x: &[f64], y: &mut [f64]) {
    match module {
        AdapterModule::Lora(lora) => {
            let mut h = vec![0.0; lora.rank()];
            matvec(lora.down(), x, &mut h);
            let up = lora.up();
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += dot(up.row(i), &h);
            }
        }
        AdapterModule::Kronecker(kron) => {
            let (a, b) = (kron.a(), kron.b());
            let (p, q) = b.shape();
            // b·x_j for every column block j of x.
            let mut bx = vec![0.0; a.cols() * p];
            for j in 0..a.cols() {
                matvec(b, &x[j * q..(j + 1) * q], &mut bx[j * p..(j + 1) * p]);
            }
            for i in 0..a.rows() {
                for r in 0..p {
                    let mut acc = 0.0;
                    for j in 0..a.cols() {
                        acc += a.get(i, j) * bx[j * p + r];
                    }
                    y[i * p + r] += acc;
                }
            }
        }
        AdapterModule::Dense(d) => {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += dot(d.row(i), x);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(w: &Matrix, x: &[f64], y: &mut [f64]) {
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = dot(w.row(i), x);
    }
}

/// `dx += Wᵀ·dy`.
fn matvec_t_acc(w: &Matrix, dy: &[f64], dx: &mut [f64]) {
    for (i, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (xj, wij) in dx.iter_mut().zip(w.row(i)) {
            *xj += d * wij;
        }
    }
}

/// `g += dy·xᵀ`.
fn outer_acc(g: &mut Matrix, dy: &[f64], x: &[f64]) {
    let cols = g.cols();
    let data = g.data_mut();
    for (i, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (gij, xj) in data[i * cols..(i + 1) * cols].iter_mut().zip(x) {
            *gij += d * xj;
        }
    }
}

fn rms_norm_rows(x: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut r = Vec::with_capacity(x.len() / k);
    for (row, out) in x.chunks(k).zip(y.chunks_mut(k)) {
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / k as f64 + RMS_EPS).sqrt();
        for (o, v) in out.iter_mut().zip(row) {
            *o = v / rms;
        }
        r.push(rms);
    }
    (y, r)
}

/// Overwrites `dx` with the gradient through `y = x / rms(x)` plus the
/// residual gradient already in `dx`.
fn rms_norm_backward(x: &[f64], r: &[f64], dy: &[f64], k: usize, dx: &mut [f64]) {
    for (t, &rms) in r.iter().enumerate() {
        let xs = &x[t * k..(t + 1) * k];
        let dys = &dy[t * k..(t + 1) * k];
        let proj = dot(dys, xs) / (k as f64 * rms * rms);
        for i in 0..k {
            dx[t * k + i] += (dys[i] - xs[i] * proj) / rms;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

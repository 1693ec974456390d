//! Joint image/text embedding backends.
//!
//! Backends are frozen: embeddings are pure functions of the input and the
//! backend seed/weights. The toy backend shares its rendering basis with
//! [`crate::toyworld`] so image embeddings recover semantic attributes exactly,
//! plus a configurable nuisance leakage and a text-side modality gap. The
//! `real` backend is a thin file-backed linear adapter loaded only when a
//! weights file is present; the whole test suite runs on the toy backend.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{f32v, Tensor};
use crate::toyworld::{gaussian, orthonormal_rows, ToyWorld, ATTR_DIM, NUISANCE_DIM};

pub const DEFAULT_EMBED_DIM: usize = 512;
pub const DEFAULT_GAP_SCALE: f64 = 0.3;
pub const DEFAULT_LEAKAGE: f64 = 0.05;

/// A vector in the joint image/text space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    normalized: bool,
}

impl Embedding {
    /// Wrap raw values without any normalization claim.
    pub fn raw(values: Vec<f32>) -> Self {
        Embedding { values, normalized: false }
    }

    /// Normalize to unit L2 length; errors on zero-norm input.
    pub fn unit(values: Vec<f32>) -> Result<Self> {
        let v = f32v::normalized(&values)
            .ok_or_else(|| Error::numeric("cannot normalize zero-norm embedding"))?;
        Ok(Embedding { values: v, normalized: true })
    }

    /// Wrap values that are already unit length (checked to 1e-6).
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        let n = f32v::l2_norm(&values);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("embedding norm {n} is not unit")));
        }
        Ok(Embedding { values, normalized: true })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn cosine(&self, other: &Embedding) -> Option<f32> {
        f32v::cosine(&self.values, &other.values)
    }
}

/// Frozen joint image/text embedder.
pub trait EmbeddingBackend: Send + Sync {
    /// Embedding dimensionality d_c.
    fn dim(&self) -> usize;

    /// Expected image shape `[C, H, W]`.
    fn image_shape(&self) -> [usize; 3];

    /// Deterministic image embedding, unit-normalized.
    fn embed_image(&self, image: &Tensor) -> Result<Embedding>;

    /// Deterministic text embedding, unit-normalized.
    fn embed_text(&self, prompt: &str) -> Result<Embedding>;

    /// Digest over all frozen weights; used to assert the backend never
    /// changes across training.
    fn param_digest(&self) -> [u8; 32];

    fn source_tag(&self) -> &str;
}

/// Embedders whose image branch can join a gradient tape (required for the
/// embedding-cycle training loss).
pub trait DifferentiableImageEmbedder: EmbeddingBackend {
    /// Graph version of `embed_image`; produces the unit embedding node.
    fn embed_image_node(&self, tape: &mut Tape, image: NodeId) -> NodeId;
}

/// Structured attribute prompt for the toy backend, e.g. `toy:a0=1,a3=-0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDescriptor {
    pub assignments: Vec<(usize, f64)>,
}

impl ToyDescriptor {
    pub fn parse(prompt: &str) -> Result<Self> {
        let body = prompt
            .strip_prefix("toy:")
            .ok_or_else(|| Error::input(format!("toy backend expects a `toy:` prompt, got {prompt:?}")))?;
        let mut assignments = Vec::new();
        for part in body.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::input(format!("bad assignment {part:?} in toy prompt")))?;
            let name = name.trim();
            let idx: usize = name
                .strip_prefix('a')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::input(format!("bad attribute name {name:?} in toy prompt")))?;
            if idx >= ATTR_DIM {
                return Err(Error::input(format!(
                    "attribute index {idx} out of range (0..{ATTR_DIM})"
                )));
            }
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::input(format!("bad attribute value in {part:?}")))?;
            if !(-1.0..=1.0).contains(&value) {
                return Err(Error::input(format!("attribute value {value} outside [-1, 1]")));
            }
            if assignments.iter().any(|(i, _)| *i == idx) {
                return Err(Error::input(format!("attribute a{idx} assigned twice")));
            }
            assignments.push((idx, value));
        }
        if assignments.is_empty() {
            return Err(Error::input("empty toy descriptor"));
        }
        Ok(ToyDescriptor { assignments })
    }

    pub fn from_full(attributes: &[f64]) -> Self {
        ToyDescriptor {
            assignments: attributes.iter().copied().enumerate().collect(),
        }
    }

    /// Dense attribute vector with unspecified entries zeroed.
    pub fn to_partial(&self) -> Vec<f64> {
        let mut a = vec![0.0; ATTR_DIM];
        for &(i, v) in &self.assignments {
            a[i] = v;
        }
        a
    }

    pub fn to_prompt(&self) -> String {
        let parts: Vec<String> =
            self.assignments.iter().map(|(i, v)| format!("a{i}={v}")).collect();
        format!("toy:{}", parts.join(","))
    }
}

#[derive(Debug, Clone)]
pub struct ToyEmbedderConfig {
    pub dim: usize,
    pub seed: u64,
    pub gap_scale: f64,
    pub leakage: f64,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        ToyEmbedderConfig {
            dim: DEFAULT_EMBED_DIM,
            seed: 0,
            gap_scale: DEFAULT_GAP_SCALE,
            leakage: DEFAULT_LEAKAGE,
        }
    }
}

/// Deterministic stand-in for a contrastive image/text embedder.
///
/// Image side: read the attribute and nuisance content out of the pixels,
/// project attributes through a frozen orthonormal map P, add `leakage`
/// times a rank-one function of the nuisance, normalize. The leak is
/// deliberately lossy (a single mixed scalar of the nuisance vector): most
/// of the nuisance is invisible to the embedding, the way pose and
/// background are underrepresented by a semantic embedder, so reconstruction
/// has to route them through the variational channel. Text side: same P
/// applied to the partial attribute vector plus `gap_scale` times a fixed
/// unit direction orthogonal to P's span (the modality gap).
pub struct ToyEmbedder {
    config: ToyEmbedderConfig,
    world: Arc<ToyWorld>,
    /// `[dim, ATTR_DIM]`, orthonormal columns.
    attr_proj: Arc<Tensor>,
    /// `[1, NUISANCE_DIM]` mixing row: the only nuisance combination that
    /// leaks into the embedding.
    nuis_mix: Arc<Tensor>,
    /// `[dim, 1]` unit leak direction, orthogonal to the attribute span.
    leak_dir: Arc<Tensor>,
    /// Unit modality-gap direction, orthogonal to the attribute projection.
    gap_dir: Vec<f64>,
    /// `[ATTR_DIM, pixels]` readout rows, pre-divided by the render scale.
    attr_readout: Arc<Tensor>,
    /// `[NUISANCE_DIM, pixels]` readout rows, pre-divided by the render scale.
    nuis_readout: Arc<Tensor>,
    digest: [u8; 32],
}

impl ToyEmbedder {
    pub fn new(world: Arc<ToyWorld>, config: ToyEmbedderConfig) -> Self {
        assert!(config.dim >= ATTR_DIM + 2, "embed dim too small");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x5851_f42d).wrapping_add(3));
        // One orthonormal family: 8 attribute directions, 1 leak direction,
        // 1 gap direction. Joint orthonormality makes the gap-free case
        // collapse modalities exactly and keeps the gap monotone in
        // gap_scale.
        let rows = orthonormal_rows(&mut rng, ATTR_DIM + 2, config.dim);
        let attr_proj = Arc::new(columns_tensor(&rows[..ATTR_DIM], config.dim));
        let leak_dir = Arc::new(columns_tensor(&rows[ATTR_DIM..ATTR_DIM + 1], config.dim));
        let gap_dir = rows[ATTR_DIM + 1].clone();
        let mix = {
            let mut v: Vec<f64> = (0..NUISANCE_DIM).map(|_| gaussian(&mut rng)).collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= n;
            }
            v
        };
        let nuis_mix = Arc::new(Tensor::new(vec![1, NUISANCE_DIM], mix));

        let pixels: usize = world.image_shape().iter().product();
        let attr_readout = Arc::new(scaled_rows_tensor(world.attr_basis(), 1.0 / world.attr_scale(), pixels));
        let nuis_readout = Arc::new(scaled_rows_tensor(world.nuis_basis(), 1.0 / world.nuis_scale(), pixels));

        let mut h = Sha256::new();
        h.update(b"toy-embedder-v2");
        h.update(config.seed.to_le_bytes());
        h.update(config.dim.to_le_bytes());
        h.update(config.gap_scale.to_le_bytes());
        h.update(config.leakage.to_le_bytes());
        for t in [&attr_proj, &nuis_mix, &leak_dir, &attr_readout, &nuis_readout] {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for v in &gap_dir {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize().into();

        ToyEmbedder {
            config,
            world,
            attr_proj,
            nuis_mix,
            leak_dir,
            gap_dir,
            attr_readout,
            nuis_readout,
            digest,
        }
    }

    pub fn with_defaults(seed: u64) -> Self {
        let world = Arc::new(ToyWorld::new(seed));
        ToyEmbedder::new(world, ToyEmbedderConfig { seed, ..Default::default() })
    }

    pub fn world(&self) -> &Arc<ToyWorld> {
        &self.world
    }

    pub fn config(&self) -> &ToyEmbedderConfig {
        &self.config
    }

    pub fn embed_descriptor(&self, descriptor: &ToyDescriptor) -> Result<Embedding> {
        let partial = descriptor.to_partial();
        let mut e = vec![0.0f64; self.config.dim];
        let p = self.attr_proj.data();
        for (i, ei) in e.iter_mut().enumerate() {
            let row = &p[i * ATTR_DIM..(i + 1) * ATTR_DIM];
            for j in 0..ATTR_DIM {
                *ei += row[j] * partial[j];
            }
        }
        for (ei, g) in e.iter_mut().zip(&self.gap_dir) {
            *ei += self.config.gap_scale * g;
        }
        let e32: Vec<f32> = e.iter().map(|&v| v as f32).collect();
        Embedding::unit(e32)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.image_shape() {
            return Err(Error::input(format!(
                "image shape {:?} does not match embedder shape {:?}",
                image.shape(),
                self.image_shape()
            )));
        }
        Ok(())
    }
}

impl EmbeddingBackend for ToyEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn image_shape(&self) -> [usize; 3] {
        self.world.image_shape()
    }

    fn embed_image(&self, image: &Tensor) -> Result<Embedding> {
        self.check_image(image)?;
        // Single implementation: run the graph path on a throwaway tape.
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.embed_image_node(&mut tape, x);
        let v = tape.value(out);
        let norm_in = crate::tensor::l2_norm(v.data());
        if norm_in < 1e-6 {
            return Err(Error::numeric("image embeds to zero-norm vector"));
        }
        Embedding::unit(v.to_f32())
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding> {
        let descriptor = ToyDescriptor::parse(prompt)?;
        self.embed_descriptor(&descriptor)
    }

    fn param_digest(&self) -> [u8; 32] {
        self.digest
    }

    fn source_tag(&self) -> &str {
        "toy"
    }
}

impl DifferentiableImageEmbedder for ToyEmbedder {
    fn embed_image_node(&self, tape: &mut Tape, image: NodeId) -> NodeId {
        let centered = tape.add_scalar(image, -0.5);
        let ra = tape.frozen(&self.attr_readout);
        let attrs = tape.affine(ra, None, centered);
        let pa = tape.frozen(&self.attr_proj);
        let sem = tape.affine(pa, None, attrs);
        let out = if self.config.leakage != 0.0 {
            let rn = tape.frozen(&self.nuis_readout);
            let nuis = tape.affine(rn, None, centered);
            let mix = tape.frozen(&self.nuis_mix);
            let mixed = tape.affine(mix, None, nuis);
            let ld = tape.frozen(&self.leak_dir);
            let leak = tape.affine(ld, None, mixed);
            let scaled = tape.scale(leak, self.config.leakage);
            tape.add(sem, scaled)
        } else {
            sem
        };
        tape.l2_normalize(out, 1e-12)
    }
}

/// File-backed linear embedder: an image projection matrix plus a token
/// vocabulary, both trained elsewhere and loaded frozen. Text embedding is
/// the normalized mean of the prompt's token vectors.
pub struct FileEmbedder {
    dim: usize,
    image_shape: [usize; 3],
    image_proj: Arc<Tensor>,
    image_bias: Arc<Tensor>,
    vocab: Vec<(String, Vec<f32>)>,
    digest: [u8; 32],
    tag: String,
}

const FILE_EMBEDDER_MAGIC: &[u8; 4] = b"LEMB";

impl FileEmbedder {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = crate::bank::ByteReader::new(&bytes);
        let magic = r.take(4)?;
        if magic != FILE_EMBEDDER_MAGIC {
            return Err(Error::format(0, "bad magic for embedder weights"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::format(4, format!("unsupported embedder version {version}")));
        }
        let dim = r.u32()? as usize;
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if dim == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::format(8, "zero dimension in embedder header"));
        }
        let pixels = c * h * w;
        let proj = r.f32_vec(dim * pixels)?;
        let bias = r.f32_vec(dim)?;
        let vocab_len = r.u32()? as usize;
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let tok = r.string()?;
            let vec = r.f32_vec(dim)?;
            vocab.push((tok, vec));
        }
        r.expect_eof()?;

        let mut hsh = Sha256::new();
        hsh.update(&bytes);
        Ok(FileEmbedder {
            dim,
            image_shape: [c, h, w],
            image_proj: Arc::new(Tensor::from_f32(vec![dim, pixels], &proj)),
            image_bias: Arc::new(Tensor::from_f32(vec![dim], &bias)),
            vocab,
            digest: hsh.finalize().into(),
            tag: format!("real:{}", path.display()),
        })
    }

    /// Serialize weights in the format `load` expects.
    pub fn save_weights(
        path: &std::path::Path,
        dim: usize,
        image_shape: [usize; 3],
        image_proj: &[f32],
        image_bias: &[f32],
        vocab: &[(String, Vec<f32>)],
    ) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(FILE_EMBEDDER_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for d in image_shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in image_proj {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in image_bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
        for (tok, vec) in vocab {
            let b = tok.as_bytes();
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(b);
            for v in vec {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

impl EmbeddingBackend for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn embed_image(&self, image: &Tensor) -> Result<Embedding> {
        if image.shape() != self.image_shape {
            return Err(Error::input(format!(
                "image shape {:?} does not match embedder shape {:?}",
                image.shape(),
                self.image_shape
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.embed_image_node(&mut tape, x);
        Embedding::unit(tape.value(out).to_f32())
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding> {
        let tokens: Vec<String> = prompt
            .to_lowercase()
            .split(|ch: char| !ch.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if tokens.is_empty() {
            return Err(Error::input("empty prompt"));
        }
        let mut acc = vec![0.0f64; self.dim];
        let mut matched = 0usize;
        for t in &tokens {
            if let Some((_, vec)) = self.vocab.iter().find(|(tok, _)| tok == t) {
                matched += 1;
                for (a, v) in acc.iter_mut().zip(vec) {
                    *a += *v as f64;
                }
            }
        }
        if matched == 0 {
            return Err(Error::input(format!("no prompt token found in vocabulary: {prompt:?}")));
        }
        let mean: Vec<f32> = acc.iter().map(|v| (*v / matched as f64) as f32).collect();
        Embedding::unit(mean)
    }

    fn param_digest(&self) -> [u8; 32] {
        self.digest
    }

    fn source_tag(&self) -> &str {
        &self.tag
    }
}

impl DifferentiableImageEmbedder for FileEmbedder {
    fn embed_image_node(&self, tape: &mut Tape, image: NodeId) -> NodeId {
        let w = tape.frozen(&self.image_proj);
        let b = tape.frozen(&self.image_bias);
        let y = tape.affine(w, Some(b), image);
        tape.l2_normalize(y, 1e-12)
    }
}

/// Pack orthonormal rows as the columns of a `[dim, count]` tensor.
fn columns_tensor(rows: &[Vec<f64>], dim: usize) -> Tensor {
    let count = rows.len();
    let mut data = vec![0.0; dim * count];
    for (j, row) in rows.iter().enumerate() {
        for i in 0..dim {
            data[i * count + j] = row[i];
        }
    }
    Tensor::new(vec![dim, count], data)
}

fn scaled_rows_tensor(rows: &[Vec<f64>], scale: f64, dim: usize) -> Tensor {
    let count = rows.len();
    let mut data = Vec::with_capacity(count * dim);
    for row in rows {
        data.extend(row.iter().map(|v| v * scale));
    }
    Tensor::new(vec![count, dim], data)
}

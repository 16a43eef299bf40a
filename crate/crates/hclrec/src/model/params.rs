//! Parameter containers, initialization, counting, and checkpoints.
//!
//! Gradients reuse the same container type (`zeros_like` + the named-view
//! visitors), so the optimizer and the checkpoint writer share one
//! canonical tensor naming scheme.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_str, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// |V|: real item count; embedding tables carry one extra padding row.
    pub n_items: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// T: window length, also the positional table height.
    pub max_len: usize,
    /// M: number of view levels; blocks number M−1 when present.
    pub levels: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0
            || self.d == 0
            || self.heads == 0
            || self.layers == 0
            || self.max_len == 0
            || self.levels == 0
        {
            return Err(Error::Config("model dimensions must all be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNormParams {
    fn zeros(d: usize) -> Self {
        LayerNormParams {
            scale: Array1::zeros(d),
            shift: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PffnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl PffnParams {
    fn zeros(d: usize) -> Self {
        PffnParams {
            w1: Array2::zeros((d, 4 * d)),
            b1: Array1::zeros(4 * d),
            w2: Array2::zeros((4 * d, d)),
            b2: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln1: LayerNormParams,
    pub pffn: PffnParams,
    pub ln2: LayerNormParams,
}

impl EncoderLayerParams {
    fn zeros(d: usize) -> Self {
        EncoderLayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln1: LayerNormParams::zeros(d),
            pffn: PffnParams::zeros(d),
            ln2: LayerNormParams::zeros(d),
        }
    }
}

/// One extra level-routing block: an encoder layer plus a second
/// feed-forward with identity residual.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub layer: EncoderLayerParams,
    pub extra: PffnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// (|V|+1) × d; row 0 is the padding item, pinned to zero.
    pub item_embedding: Array2<f64>,
    /// T × d.
    pub positional: Array2<f64>,
    pub encoder: Vec<EncoderLayerParams>,
    /// Empty when the model runs without level routing.
    pub blocks: Vec<BlockParams>,
}

/// Closed-form parameter count for the given shape.
pub fn expected_param_count(dims: &ModelDims, n_blocks: usize) -> usize {
    let d = dims.d;
    let per_layer = 12 * d * d + 9 * d;
    let per_block = 20 * d * d + 14 * d;
    (dims.n_items + 1 + dims.max_len) * d + dims.layers * per_layer + n_blocks * per_block
}

fn visit_ln<'a>(
    prefix: &str,
    ln: &'a LayerNormParams,
    out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
) {
    out.push((format!("{prefix}.scale"), ln.scale.view().into_dyn()));
    out.push((format!("{prefix}.shift"), ln.shift.view().into_dyn()));
}

fn visit_pffn<'a>(
    prefix: &str,
    p: &'a PffnParams,
    out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
) {
    out.push((format!("{prefix}.w1"), p.w1.view().into_dyn()));
    out.push((format!("{prefix}.b1"), p.b1.view().into_dyn()));
    out.push((format!("{prefix}.w2"), p.w2.view().into_dyn()));
    out.push((format!("{prefix}.b2"), p.b2.view().into_dyn()));
}

fn visit_layer<'a>(
    prefix: &str,
    l: &'a EncoderLayerParams,
    out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
) {
    out.push((format!("{prefix}.wq"), l.wq.view().into_dyn()));
    out.push((format!("{prefix}.wk"), l.wk.view().into_dyn()));
    out.push((format!("{prefix}.wv"), l.wv.view().into_dyn()));
    out.push((format!("{prefix}.wo"), l.wo.view().into_dyn()));
    visit_ln(&format!("{prefix}.ln1"), &l.ln1, out);
    visit_pffn(&format!("{prefix}.pffn"), &l.pffn, out);
    visit_ln(&format!("{prefix}.ln2"), &l.ln2, out);
}

fn visit_ln_mut<'a>(
    prefix: &str,
    ln: &'a mut LayerNormParams,
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
) {
    out.push((format!("{prefix}.scale"), ln.scale.view_mut().into_dyn()));
    out.push((format!("{prefix}.shift"), ln.shift.view_mut().into_dyn()));
}

fn visit_pffn_mut<'a>(
    prefix: &str,
    p: &'a mut PffnParams,
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
) {
    out.push((format!("{prefix}.w1"), p.w1.view_mut().into_dyn()));
    out.push((format!("{prefix}.b1"), p.b1.view_mut().into_dyn()));
    out.push((format!("{prefix}.w2"), p.w2.view_mut().into_dyn()));
    out.push((format!("{prefix}.b2"), p.b2.view_mut().into_dyn()));
}

fn visit_layer_mut<'a>(
    prefix: &str,
    l: &'a mut EncoderLayerParams,
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
) {
    out.push((format!("{prefix}.wq"), l.wq.view_mut().into_dyn()));
    out.push((format!("{prefix}.wk"), l.wk.view_mut().into_dyn()));
    out.push((format!("{prefix}.wv"), l.wv.view_mut().into_dyn()));
    out.push((format!("{prefix}.wo"), l.wo.view_mut().into_dyn()));
    visit_ln_mut(&format!("{prefix}.ln1"), &mut l.ln1, out);
    visit_pffn_mut(&format!("{prefix}.pffn"), &mut l.pffn, out);
    visit_ln_mut(&format!("{prefix}.ln2"), &mut l.ln2, out);
}

impl ModelParams {
    /// All tensors as zeros; the shared shape for gradients and loads.
    pub fn zeros(dims: ModelDims, n_blocks: usize) -> Result<Self> {
        dims.validate()?;
        if n_blocks != 0 && n_blocks != dims.levels - 1 {
            return Err(Error::Config(format!(
                "blocks must number levels-1 = {} or 0, got {n_blocks}",
                dims.levels - 1
            )));
        }
        Ok(ModelParams {
            dims,
            item_embedding: Array2::zeros((dims.n_items + 1, dims.d)),
            positional: Array2::zeros((dims.max_len, dims.d)),
            encoder: (0..dims.layers).map(|_| EncoderLayerParams::zeros(dims.d)).collect(),
            blocks: (0..n_blocks)
                .map(|_| BlockParams {
                    layer: EncoderLayerParams::zeros(dims.d),
                    extra: PffnParams::zeros(dims.d),
                })
                .collect(),
        })
    }

    /// Gradient buffer with this model's exact shape.
    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims, self.blocks.len()).expect("own dims are valid")
    }

    /// Fresh weights: truncated normal (std 0.02, resampled beyond 2σ) for
    /// matrices, ones for norm scales, zeros for biases and shifts. Every
    /// tensor draws from its own name-derived stream, so adding or removing
    /// blocks never shifts other tensors' values.
    pub fn init(dims: ModelDims, with_blocks: bool, seed: u64) -> Result<Self> {
        let n_blocks = if with_blocks && dims.levels > 1 {
            dims.levels - 1
        } else {
            0
        };
        let mut params = ModelParams::zeros(dims, n_blocks)?;
        for (name, mut view) in params.named_views_mut() {
            if name.ends_with(".scale") {
                view.fill(1.0);
            } else if name.ends_with(".shift")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
            {
                // stays zero
            } else {
                let mut rng = stream(mix_str(seed, &name));
                let std = 0.02;
                for x in view.iter_mut() {
                    *x = loop {
                        let v: f64 = rng.sample(rand_distr::StandardNormal);
                        let v = v * std;
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    };
                }
            }
        }
        params.item_embedding.row_mut(0).fill(0.0);
        Ok(params)
    }

    pub fn has_blocks(&self) -> bool {
        !self.blocks.is_empty()
    }

    /// Drop block parameters; inference never touches them.
    pub fn strip_blocks(&mut self) {
        self.blocks.clear();
    }

    pub fn param_count(&self) -> usize {
        self.named_views().iter().map(|(_, v)| v.len()).sum()
    }

    /// Canonical (name, tensor) listing: embeddings, encoder layers in
    /// order, then blocks in order.
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.push(("item_embedding".to_string(), self.item_embedding.view().into_dyn()));
        out.push(("positional".to_string(), self.positional.view().into_dyn()));
        for (i, l) in self.encoder.iter().enumerate() {
            visit_layer(&format!("encoder.{i}"), l, &mut out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            visit_layer(&format!("block.{i}.layer"), &b.layer, &mut out);
            visit_pffn(&format!("block.{i}.extra"), &b.extra, &mut out);
        }
        out
    }

    pub fn named_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.push((
            "item_embedding".to_string(),
            self.item_embedding.view_mut().into_dyn(),
        ));
        out.push(("positional".to_string(), self.positional.view_mut().into_dyn()));
        for (i, l) in self.encoder.iter_mut().enumerate() {
            visit_layer_mut(&format!("encoder.{i}"), l, &mut out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_layer_mut(&format!("block.{i}.layer"), &mut b.layer, &mut out);
            visit_pffn_mut(&format!("block.{i}.extra"), &mut b.extra, &mut out);
        }
        out
    }

    /// Largest absolute entry across the block tensors; zero when no blocks.
    pub fn max_abs_block_value(&self) -> f64 {
        self.named_views()
            .iter()
            .filter(|(name, _)| name.starts_with("block."))
            .flat_map(|(_, v)| v.iter().copied().collect::<Vec<_>>())
            .fold(0.0, |acc: f64, x| acc.max(x.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    pub seed: u64,
    pub epoch: usize,
    pub has_blocks: bool,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HCLCKPT1";

/// Write all tensors with a JSON header. Block tensors are included only
/// when present; a stripped checkpoint loads the same for inference.
pub fn save_checkpoint(
    params: &ModelParams,
    seed: u64,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let meta = CheckpointMeta {
        dims: params.dims,
        seed,
        epoch,
        has_blocks: params.has_blocks(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for (name, view) in params.named_views() {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u16).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(view.ndim() as u8).to_le_bytes())?;
        for &dim in view.shape() {
            f.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &x in view.iter() {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header = vec![0u8; header_len];
    f.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    let n_blocks = if meta.has_blocks { meta.dims.levels - 1 } else { 0 };
    let mut params = ModelParams::zeros(meta.dims, n_blocks)?;

    let mut tensors: std::collections::HashMap<String, ArrayD<f64>> =
        std::collections::HashMap::new();
    loop {
        let mut len2 = [0u8; 2];
        match f.read_exact(&mut len2) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("checkpoint tensor name is not utf-8".into()))?;
        let mut ndim1 = [0u8; 1];
        f.read_exact(&mut ndim1)?;
        let mut shape = Vec::with_capacity(ndim1[0] as usize);
        for _ in 0..ndim1[0] {
            f.read_exact(&mut len8)?;
            shape.push(u64::from_le_bytes(len8) as usize);
        }
        let total: usize = shape.iter().product();
        let mut data = vec![0.0f64; total];
        for x in data.iter_mut() {
            f.read_exact(&mut len8)?;
            *x = f64::from_le_bytes(len8);
        }
        let arr = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| Error::Data(format!("checkpoint tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }

    for (name, mut view) in params.named_views_mut() {
        let arr = tensors.remove(&name).ok_or_else(|| {
            Error::Data(format!("checkpoint missing tensor `{name}`"))
        })?;
        if arr.shape() != view.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                arr.shape(),
                view.shape()
            )));
        }
        view.assign(&arr);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Data(format!("checkpoint has unknown tensor `{extra}`")));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            n_items: 11,
            d: 8,
            heads: 2,
            layers: 2,
            max_len: 6,
            levels: 3,
        }
    }

    #[test]
    fn count_matches_closed_form() {
        let p = ModelParams::init(dims(), true, 0).unwrap();
        assert_eq!(p.param_count(), expected_param_count(&dims(), 2));
        let q = ModelParams::init(dims(), false, 0).unwrap();
        assert_eq!(q.param_count(), expected_param_count(&dims(), 0));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut d = dims();
        d.heads = 3;
        assert!(ModelParams::init(d, true, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(dims(), true, 42).unwrap();
        let b = ModelParams::init(dims(), true, 42).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(dims(), true, 43).unwrap();
        assert_ne!(a, c);
        for (name, view) in a.named_views() {
            if name.ends_with(".scale") {
                assert!(view.iter().all(|&x| x == 1.0));
            } else {
                assert!(
                    view.iter().all(|&x| x.abs() <= 0.04 + 1e-12),
                    "{name} exceeds truncation"
                );
            }
        }
        assert!(a.item_embedding.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn block_weights_do_not_shift_encoder_weights() {
        let with = ModelParams::init(dims(), true, 7).unwrap();
        let without = ModelParams::init(dims(), false, 7).unwrap();
        assert_eq!(with.item_embedding, without.item_embedding);
        assert_eq!(with.encoder, without.encoder);
    }

    #[test]
    fn named_views_are_unique_and_ordered() {
        let p = ModelParams::init(dims(), true, 0).unwrap();
        let names: Vec<String> = p.named_views().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names[0], "item_embedding");
        assert_eq!(names[1], "positional");
        assert!(names.iter().any(|n| n == "block.1.extra.w2"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = ModelParams::init(dims(), true, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, 9, 4, &path).unwrap();
        let (q, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta.epoch, 4);
        assert_eq!(meta.seed, 9);
        assert!(meta.has_blocks);
    }

    #[test]
    fn stripped_checkpoint_loads_without_blocks() {
        let mut p = ModelParams::init(dims(), true, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full.ckpt");
        save_checkpoint(&p, 9, 1, &full).unwrap();
        p.strip_blocks();
        let stripped = dir.path().join("stripped.ckpt");
        save_checkpoint(&p, 9, 1, &stripped).unwrap();
        let (q, meta) = load_checkpoint(&stripped).unwrap();
        assert!(!meta.has_blocks);
        assert!(q.blocks.is_empty());
        let (full_again, _) = load_checkpoint(&full).unwrap();
        assert_eq!(full_again.item_embedding, q.item_embedding);
        assert_eq!(full_again.encoder, q.encoder);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let p = ModelParams::init(dims(), false, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, 0, 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

//! Parameter storage, initialization, and the binary checkpoint format.
//!
//! One parameter set serves every forward path; nothing is ever copied per
//! pass. `named()` fixes the canonical array order used by the optimizer
//! and the checkpoint file alike.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::rng::{stream_rng, Stream};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMDCKPT1";

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
    /// Absent when the output projection is tied to `tok_emb`.
    pub out_proj: Option<Vec<f64>>,
}

/// Canonical (name, shape) list for a config, in storage order.
pub fn array_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, s) = (config.vocab_size, config.d_model, config.max_seq_len);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![s, d]),
    ];
    for l in 0..config.n_layers {
        out.push((format!("layer{l}.attn_norm"), vec![d]));
        out.push((format!("layer{l}.wq"), vec![d, d]));
        out.push((format!("layer{l}.wk"), vec![d, d]));
        out.push((format!("layer{l}.wv"), vec![d, d]));
        out.push((format!("layer{l}.wo"), vec![d, d]));
        out.push((format!("layer{l}.mlp_norm"), vec![d]));
        out.push((format!("layer{l}.w1"), vec![d, 4 * d]));
        out.push((format!("layer{l}.w2"), vec![4 * d, d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    if !config.tied_output {
        out.push(("out_proj".to_string(), vec![d, v]));
    }
    out
}

fn init_weight(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| INIT_STD * crate::rng::standard_normal(rng)).collect()
}

impl Parameters {
    /// Weights N(0, 0.02), norm scales 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let (v, d, s) = (config.vocab_size, config.d_model, config.max_seq_len);
        let tok_emb = init_weight(v * d, &mut rng);
        let pos_emb = init_weight(s * d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![1.0; d],
                wq: init_weight(d * d, &mut rng),
                wk: init_weight(d * d, &mut rng),
                wv: init_weight(d * d, &mut rng),
                wo: init_weight(d * d, &mut rng),
                mlp_norm: vec![1.0; d],
                w1: init_weight(d * 4 * d, &mut rng),
                w2: init_weight(4 * d * d, &mut rng),
            })
            .collect();
        let out_proj = if config.tied_output { None } else { Some(init_weight(d * v, &mut rng)) };
        Parameters {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: vec![1.0; d],
            out_proj,
        }
    }

    /// Arrays in canonical order; matches `array_shapes(self.config)`.
    pub fn named(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".to_string(), self.tok_emb.as_slice()),
            ("pos_emb".to_string(), self.pos_emb.as_slice()),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), layer.attn_norm.as_slice()));
            out.push((format!("layer{l}.wq"), layer.wq.as_slice()));
            out.push((format!("layer{l}.wk"), layer.wk.as_slice()));
            out.push((format!("layer{l}.wv"), layer.wv.as_slice()));
            out.push((format!("layer{l}.wo"), layer.wo.as_slice()));
            out.push((format!("layer{l}.mlp_norm"), layer.mlp_norm.as_slice()));
            out.push((format!("layer{l}.w1"), layer.w1.as_slice()));
            out.push((format!("layer{l}.w2"), layer.w2.as_slice()));
        }
        out.push(("final_norm".to_string(), self.final_norm.as_slice()));
        if let Some(op) = &self.out_proj {
            out.push(("out_proj".to_string(), op.as_slice()));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &mut layer.attn_norm));
            out.push((format!("layer{l}.wq"), &mut layer.wq));
            out.push((format!("layer{l}.wk"), &mut layer.wk));
            out.push((format!("layer{l}.wv"), &mut layer.wv));
            out.push((format!("layer{l}.wo"), &mut layer.wo));
            out.push((format!("layer{l}.mlp_norm"), &mut layer.mlp_norm));
            out.push((format!("layer{l}.w1"), &mut layer.w1));
            out.push((format!("layer{l}.w2"), &mut layer.w2));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        if let Some(op) = &mut self.out_proj {
            out.push(("out_proj".to_string(), op));
        }
        out
    }

    /// The effective output projection: `out_proj`, or `tok_emb` when tied.
    pub fn output_matrix(&self) -> &[f64] {
        self.out_proj.as_deref().unwrap_or(&self.tok_emb)
    }
}

// ── Checkpoint I/O ──
//
// magic "SMDCKPT1", then per array: name length (u64 LE), name bytes,
// rank (u64 LE), dims (u64 LE each), data (f64 LE, row-major), in
// canonical array order.

pub fn save_checkpoint(path: &Path, params: &Parameters) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let shapes = array_shapes(&params.config);
    for ((name, data), (shape_name, shape)) in params.named().iter().zip(&shapes) {
        debug_assert_eq!(name, shape_name);
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &x in *data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Parameters, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {:?}, want {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    let mut params = Parameters::init(config, 0);
    let expected = array_shapes(config);
    for (i, (want_name, want_shape)) in expected.iter().enumerate() {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| ModelError::Checkpoint(format!("array {i} name not utf-8: {e}")))?;
        if &name != want_name {
            return Err(ModelError::Checkpoint(format!(
                "array {i} is {name:?}, want {want_name:?}"
            )));
        }
        let rank = read_u64(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        if &dims != want_shape {
            return Err(ModelError::Checkpoint(format!(
                "{name}: shape {dims:?}, want {want_shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        *params
            .named_mut()
            .into_iter()
            .find(|(n, _)| n == &name)
            .expect("name already validated")
            .1 = data;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic_with_unit_norms() {
        let cfg = ModelConfig::default();
        let a = Parameters::init(&cfg, 3);
        let b = Parameters::init(&cfg, 3);
        assert_eq!(a.tok_emb, b.tok_emb);
        assert_eq!(a.layers[1].w2, b.layers[1].w2);
        assert!(a.final_norm.iter().all(|&x| x == 1.0));
        let c = Parameters::init(&cfg, 4);
        assert_ne!(a.tok_emb, c.tok_emb);
    }

    #[test]
    fn named_order_matches_shapes() {
        let cfg = ModelConfig::default();
        let p = Parameters::init(&cfg, 0);
        let shapes = array_shapes(&cfg);
        let named = p.named();
        assert_eq!(named.len(), shapes.len());
        for ((name, data), (sname, shape)) in named.iter().zip(&shapes) {
            assert_eq!(name, sname);
            assert_eq!(data.len(), shape.iter().product::<usize>());
        }
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, vocab_size: 11, max_seq_len: 16, tied_output: false };
        let p = Parameters::init(&cfg, 9);
        let dir = std::env::temp_dir().join("smd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path, &cfg).unwrap();
        for ((an, ad), (bn, bd)) in p.named().iter().zip(q.named().iter()) {
            assert_eq!(an, bn);
            assert_eq!(ad, bd, "array {an} changed in roundtrip");
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_config() {
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, vocab_size: 11, max_seq_len: 16, tied_output: false };
        let p = Parameters::init(&cfg, 9);
        let dir = std::env::temp_dir().join("smd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mismatch.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let other = ModelConfig { d_model: 16, n_heads: 2, ..cfg };
        assert!(matches!(load_checkpoint(&path, &other), Err(ModelError::Checkpoint(_))));
    }
}

//! Binary checkpoint format.
//!
//! Layout: 7-byte magic `MAEMI01`; u32 LE metadata length + UTF-8 JSON
//! metadata; u32 LE tensor count; per tensor (u16 LE name length, name bytes,
//! u8 dtype code, u8 ndim, u32 LE dims, little-endian payload). Loading
//! parses the whole file before constructing anything, so a truncated or
//! corrupted file never yields a partial model.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterLinear, AlphaMode, BaseWeight};
use crate::error::{Error, Result};
use crate::fusion::{AdapterMha, FusionBlock, FusionConfig, FusionModel};
use crate::quant::QuantizedMatrix;
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::trainer::{EpochRecord, TrainConfig};
use crate::vision::{PlainMha, VisionConfig, VisionEncoder, VisionLayer};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 7] = b"MAEMI01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fusion: FusionConfig,
    pub vision: VisionConfig,
    pub train: Option<TrainConfig>,
    pub vocab_tokens: Vec<String>,
    pub vocab_hash: String,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub quantized: bool,
}

/// Everything needed to resume or run inference.
pub struct ModelBundle<T: Scalar> {
    pub fusion: FusionModel<T>,
    pub vision: VisionEncoder<T>,
    pub vocab: Vocabulary,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// FNV-1a over the vocabulary tokens, for a cheap integrity fingerprint.
pub fn vocab_fingerprint(vocab: &Vocabulary) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in vocab.tokens() {
        for &b in t.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

struct TensorEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn entry_from_tensor<T: Scalar>(t: &Tensor<T>) -> TensorEntry {
    let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    TensorEntry {
        dtype: T::DTYPE,
        shape: t.shape().to_vec(),
        bytes,
    }
}

fn entry_from_i8(q: &[i8], shape: &[usize]) -> TensorEntry {
    TensorEntry {
        dtype: Dtype::I8,
        shape: shape.to_vec(),
        bytes: q.iter().map(|&v| v as u8).collect(),
    }
}

fn tensor_from_entry<T: Scalar>(name: &str, e: &TensorEntry) -> Result<Tensor<T>> {
    if e.dtype != T::DTYPE {
        return Err(Error::ShapeMismatchOnLoad { name: name.into() });
    }
    let n: usize = e.shape.iter().product();
    if e.bytes.len() != n * T::DTYPE.size() {
        return Err(Error::ShapeMismatchOnLoad { name: name.into() });
    }
    let sz = T::DTYPE.size();
    let data: Vec<T> = (0..n).map(|i| T::read_le(&e.bytes[i * sz..(i + 1) * sz])).collect();
    Tensor::from_vec(&e.shape, data).map_err(|_| Error::ShapeMismatchOnLoad { name: name.into() })
}

struct TensorWriter {
    entries: Vec<(String, TensorEntry)>,
}

impl TensorWriter {
    fn new() -> Self {
        TensorWriter { entries: Vec::new() }
    }

    fn put<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), entry_from_tensor(t)));
    }

    fn put_scalar<T: Scalar>(&mut self, name: impl Into<String>, v: T) {
        let t = Tensor::from_vec(&[1], vec![v]).expect("scalar tensor");
        self.put(name, &t);
    }

    fn put_adapter<T: Scalar>(&mut self, prefix: &str, l: &AdapterLinear<T>) {
        match l.w0() {
            BaseWeight::Plain(w) => self.put(format!("{prefix}.w0"), w),
            BaseWeight::Quantized(q) => {
                self.entries.push((
                    format!("{prefix}.w0.q"),
                    entry_from_i8(q.q(), &[q.d_in(), q.d_out()]),
                ));
                let scales = Tensor::from_vec(&[q.d_out()], q.scales().to_vec())
                    .expect("scale vector");
                self.put(format!("{prefix}.w0.scales"), &scales);
            }
        }
        self.put(format!("{prefix}.a"), l.a());
        self.put(format!("{prefix}.b"), l.b());
    }
}

struct TensorReader {
    entries: HashMap<String, TensorEntry>,
}

impl TensorReader {
    fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::ShapeMismatchOnLoad { name: name.into() })?;
        tensor_from_entry(name, e)
    }

    fn get_scalar<T: Scalar>(&self, name: &str) -> Result<T> {
        let t: Tensor<T> = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::ShapeMismatchOnLoad { name: name.into() });
        }
        Ok(t.data()[0])
    }

    fn get_adapter<T: Scalar>(
        &self,
        prefix: &str,
        cfg: &FusionConfig,
    ) -> Result<AdapterLinear<T>> {
        let w0 = if self.entries.contains_key(&format!("{prefix}.w0")) {
            BaseWeight::Plain(self.get(&format!("{prefix}.w0"))?)
        } else {
            let qname = format!("{prefix}.w0.q");
            let e = self
                .entries
                .get(&qname)
                .ok_or_else(|| Error::ShapeMismatchOnLoad { name: qname.clone() })?;
            if e.dtype != Dtype::I8 || e.shape.len() != 2 {
                return Err(Error::ShapeMismatchOnLoad { name: qname });
            }
            let q: Vec<i8> = e.bytes.iter().map(|&b| b as i8).collect();
            let scales: Tensor<T> = self.get(&format!("{prefix}.w0.scales"))?;
            BaseWeight::Quantized(
                QuantizedMatrix::from_parts(q, scales.data().to_vec(), e.shape[0], e.shape[1])
                    .map_err(|_| Error::ShapeMismatchOnLoad { name: qname })?,
            )
        };
        AdapterLinear::from_parts(
            w0,
            self.get(&format!("{prefix}.a"))?,
            self.get(&format!("{prefix}.b"))?,
            cfg.r_min,
            cfg.r_max,
            AlphaMode::OneOverRank,
            cfg.dropout,
            cfg.mode,
        )
        .map_err(|_| Error::ShapeMismatchOnLoad {
            name: prefix.into(),
        })
    }
}

fn collect_tensors<T: Scalar>(bundle: &ModelBundle<T>) -> TensorWriter {
    let mut w = TensorWriter::new();
    let f = &bundle.fusion;
    w.put("embed", &f.embed);
    w.put("pos", &f.pos);
    w.put("vis_proj", &f.vis_proj);
    w.put("final_norm", &f.final_norm);
    for (i, b) in f.blocks.iter().enumerate() {
        let p = format!("block{i}");
        w.put_scalar(format!("{p}.gate"), b.gate);
        w.put(format!("{p}.norm_cross"), &b.norm_cross);
        w.put(format!("{p}.norm_self"), &b.norm_self);
        w.put(format!("{p}.norm_ffn"), &b.norm_ffn);
        for (tag, mha) in [("cross", &b.cross), ("self", &b.self_attn)] {
            w.put_adapter(&format!("{p}.{tag}.q"), &mha.q);
            w.put_adapter(&format!("{p}.{tag}.k"), &mha.k);
            w.put_adapter(&format!("{p}.{tag}.v"), &mha.v);
            w.put_adapter(&format!("{p}.{tag}.o"), &mha.o);
        }
        w.put_adapter(&format!("{p}.ffn_w1"), &b.ffn_w1);
        w.put_adapter(&format!("{p}.ffn_w2"), &b.ffn_w2);
    }
    let v = &bundle.vision;
    w.put("vision.patch_proj", &v.patch_proj);
    w.put("vision.cls", &v.cls);
    w.put("vision.pos", &v.pos);
    w.put("vision.final_norm", &v.final_norm);
    for (i, l) in v.layers.iter().enumerate() {
        let p = format!("vision.layer{i}");
        for (tag, mha) in [("local", &l.local), ("global", &l.global)] {
            w.put(format!("{p}.{tag}.wq"), &mha.wq);
            w.put(format!("{p}.{tag}.wk"), &mha.wk);
            w.put(format!("{p}.{tag}.wv"), &mha.wv);
            w.put(format!("{p}.{tag}.wo"), &mha.wo);
        }
        w.put(format!("{p}.ffn_w1"), &l.ffn_w1);
        w.put(format!("{p}.ffn_w2"), &l.ffn_w2);
        w.put(format!("{p}.norm_local"), &l.norm_local);
        w.put(format!("{p}.norm_global"), &l.norm_global);
        w.put(format!("{p}.norm_ffn"), &l.norm_ffn);
    }
    w
}

fn is_quantized<T: Scalar>(fusion: &FusionModel<T>) -> bool {
    fusion
        .adapters()
        .first()
        .map(|l| matches!(l.w0(), BaseWeight::Quantized(_)))
        .unwrap_or(false)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, bundle: &ModelBundle<T>) -> Result<()> {
    let meta = CheckpointMeta {
        fusion: bundle.fusion.cfg.clone(),
        vision: bundle.vision.cfg.clone(),
        train: bundle.train.clone(),
        vocab_tokens: bundle.vocab.tokens().to_vec(),
        vocab_hash: vocab_fingerprint(&bundle.vocab),
        epoch: bundle.epoch,
        history: bundle.history.clone(),
        quantized: is_quantized(&bundle.fusion),
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
    let tensors = collect_tensors(bundle);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.entries.len() as u32).to_le_bytes());
    for (name, e) in &tensors.entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(e.dtype.code());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&e.bytes);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelBundle<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact_buf(&mut f, MAGIC.len()).map_err(|_| Error::BadMagic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let meta_len = u32::from_le_bytes(
        read_exact_buf(&mut f, 4)?
            .try_into()
            .expect("4 bytes"),
    ) as usize;
    let meta_json = read_exact_buf(&mut f, meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::Format(format!("metadata decode: {e}")))?;
    let count = u32::from_le_bytes(read_exact_buf(&mut f, 4)?.try_into().expect("4 bytes")) as usize;
    let mut entries = HashMap::with_capacity(count);
    for _ in 0..count {
        let nl = u16::from_le_bytes(read_exact_buf(&mut f, 2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(read_exact_buf(&mut f, nl)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let head = read_exact_buf(&mut f, 2)?;
        let dtype = Dtype::from_code(head[0]).ok_or(Error::BadMagic)?;
        let ndim = head[1] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(
                u32::from_le_bytes(read_exact_buf(&mut f, 4)?.try_into().expect("4 bytes")) as usize,
            );
        }
        let n: usize = shape.iter().product();
        let bytes = read_exact_buf(&mut f, n * dtype.size())?;
        entries.insert(name, TensorEntry { dtype, shape, bytes });
    }
    let reader = TensorReader { entries };
    let vocab = Vocabulary::from_tokens(meta.vocab_tokens.clone())?;
    if vocab_fingerprint(&vocab) != meta.vocab_hash {
        return Err(Error::Format("vocabulary fingerprint mismatch".into()));
    }
    meta.fusion.validate()?;
    meta.vision.validate()?;
    let fcfg = meta.fusion.clone();
    let mut blocks = Vec::with_capacity(fcfg.blocks);
    for i in 0..fcfg.blocks {
        let p = format!("block{i}");
        let mha = |tag: &str| -> Result<AdapterMha<T>> {
            Ok(AdapterMha {
                q: reader.get_adapter(&format!("{p}.{tag}.q"), &fcfg)?,
                k: reader.get_adapter(&format!("{p}.{tag}.k"), &fcfg)?,
                v: reader.get_adapter(&format!("{p}.{tag}.v"), &fcfg)?,
                o: reader.get_adapter(&format!("{p}.{tag}.o"), &fcfg)?,
            })
        };
        blocks.push(FusionBlock {
            gate: reader.get_scalar(&format!("{p}.gate"))?,
            cross: mha("cross")?,
            self_attn: mha("self")?,
            ffn_w1: reader.get_adapter(&format!("{p}.ffn_w1"), &fcfg)?,
            ffn_w2: reader.get_adapter(&format!("{p}.ffn_w2"), &fcfg)?,
            norm_cross: reader.get(&format!("{p}.norm_cross"))?,
            norm_self: reader.get(&format!("{p}.norm_self"))?,
            norm_ffn: reader.get(&format!("{p}.norm_ffn"))?,
        });
    }
    let fusion = FusionModel {
        cfg: fcfg,
        embed: reader.get("embed")?,
        pos: reader.get("pos")?,
        vis_proj: reader.get("vis_proj")?,
        blocks,
        final_norm: reader.get("final_norm")?,
    };
    let vcfg = meta.vision.clone();
    let mut layers = Vec::with_capacity(vcfg.layers);
    for i in 0..vcfg.layers {
        let p = format!("vision.layer{i}");
        let mha = |tag: &str| -> Result<PlainMha<T>> {
            Ok(PlainMha {
                wq: reader.get(&format!("{p}.{tag}.wq"))?,
                wk: reader.get(&format!("{p}.{tag}.wk"))?,
                wv: reader.get(&format!("{p}.{tag}.wv"))?,
                wo: reader.get(&format!("{p}.{tag}.wo"))?,
            })
        };
        layers.push(VisionLayer {
            local: mha("local")?,
            global: mha("global")?,
            ffn_w1: reader.get(&format!("{p}.ffn_w1"))?,
            ffn_w2: reader.get(&format!("{p}.ffn_w2"))?,
            norm_local: reader.get(&format!("{p}.norm_local"))?,
            norm_global: reader.get(&format!("{p}.norm_global"))?,
            norm_ffn: reader.get(&format!("{p}.norm_ffn"))?,
        });
    }
    let vision = VisionEncoder {
        cfg: vcfg,
        patch_proj: reader.get("vision.patch_proj")?,
        cls: reader.get("vision.cls")?,
        pos: reader.get("vision.pos")?,
        layers,
        final_norm: reader.get("vision.final_norm")?,
    };
    Ok(ModelBundle {
        fusion,
        vision,
        vocab,
        train: meta.train,
        epoch: meta.epoch,
        history: meta.history,
    })
}

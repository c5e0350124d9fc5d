//! Versioned little-endian binary checkpoints of the full training state.
//!
//! Layout: magic, version, JSON header (encoder config, tokenizer, caller
//! metadata), then parameters, momentum parameters, the three queues, the
//! optimizer state, the RNG position and the step counter. Tensors are stored
//! as `f64`, so `f32` states round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_queue::FeatureQueue;
use crate::model::ModelState;
use crate::neural::{EncoderConfig, Tokenizer};
use crate::params::{AdamW, ParamStore};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"KEMPCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    cfg: EncoderConfig,
    tokenizer: Tokenizer,
    meta: serde_json::Value,
}

fn ck(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LE>(b.len() as u64)?;
    w.write_all(b)
}

fn read_bytes<R: Read>(r: &mut R, limit: u64) -> Result<Vec<u8>> {
    let n = r.read_u64::<LE>().map_err(ck)?;
    if n > limit {
        return Err(Error::Checkpoint(format!("field length {n} exceeds {limit}")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(ck)?;
    Ok(b)
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    String::from_utf8(read_bytes(r, 1 << 20)?).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_tensor<W: Write, T: Scalar>(w: &mut W, a: &Array2<T>) -> std::io::Result<()> {
    w.write_u64::<LE>(a.nrows() as u64)?;
    w.write_u64::<LE>(a.ncols() as u64)?;
    for e in a.iter() {
        w.write_f64::<LE>(e.as_f64())?;
    }
    Ok(())
}

fn read_tensor<R: Read, T: Scalar>(r: &mut R) -> Result<Array2<T>> {
    let rows = r.read_u64::<LE>().map_err(ck)? as usize;
    let cols = r.read_u64::<LE>().map_err(ck)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(Error::Checkpoint(format!("tensor {rows}x{cols} too large")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::lit(r.read_f64::<LE>().map_err(ck)?));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn write_store<W: Write, T: Scalar>(w: &mut W, ps: &ParamStore<T>) -> std::io::Result<()> {
    w.write_u64::<LE>(ps.len() as u64)?;
    for (name, a) in ps.iter() {
        write_bytes(w, name.as_bytes())?;
        write_tensor(w, a)?;
    }
    Ok(())
}

fn read_store<R: Read, T: Scalar>(r: &mut R) -> Result<ParamStore<T>> {
    let n = r.read_u64::<LE>().map_err(ck)?;
    let mut ps = ParamStore::new();
    for _ in 0..n {
        let name = read_string(r)?;
        ps.insert(name, read_tensor(r)?);
    }
    Ok(ps)
}

fn write_u64s<W: Write>(w: &mut W, xs: &[u64]) -> std::io::Result<()> {
    w.write_u64::<LE>(xs.len() as u64)?;
    xs.iter().try_for_each(|&x| w.write_u64::<LE>(x))
}

fn read_u64s<R: Read>(r: &mut R) -> Result<Vec<u64>> {
    let n = r.read_u64::<LE>().map_err(ck)?;
    if n > 1 << 28 {
        return Err(Error::Checkpoint(format!("id list of {n} entries")));
    }
    (0..n).map(|_| r.read_u64::<LE>().map_err(ck)).collect()
}

fn write_queue<W: Write, T: Scalar>(w: &mut W, q: &FeatureQueue<T>) -> std::io::Result<()> {
    let (vectors, ids, stamps, count, cursor, next_stamp) = q.raw_parts();
    write_tensor(w, vectors)?;
    write_u64s(w, ids)?;
    write_u64s(w, stamps)?;
    w.write_u64::<LE>(count as u64)?;
    w.write_u64::<LE>(cursor as u64)?;
    w.write_u64::<LE>(next_stamp)
}

fn read_queue<R: Read, T: Scalar>(r: &mut R) -> Result<FeatureQueue<T>> {
    let vectors = read_tensor(r)?;
    let ids = read_u64s(r)?;
    let stamps = read_u64s(r)?;
    let count = r.read_u64::<LE>().map_err(ck)? as usize;
    let cursor = r.read_u64::<LE>().map_err(ck)? as usize;
    let next_stamp = r.read_u64::<LE>().map_err(ck)?;
    FeatureQueue::from_raw_parts(vectors, ids, stamps, count, cursor, next_stamp)
}

pub fn write_state<W: Write, T: Scalar>(w: &mut W, state: &ModelState<T>, meta: &serde_json::Value) -> Result<()> {
    let header = Header { cfg: state.cfg.clone(), tokenizer: state.tokenizer.clone(), meta: meta.clone() };
    let io = |w: &mut W| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_bytes(w, &serde_json::to_vec(&header).map_err(std::io::Error::other)?)?;
        write_store(w, &state.params)?;
        write_store(w, &state.momentum)?;
        for q in [&state.img_queue, &state.txt_queue, &state.report_queue] {
            write_queue(w, q)?;
        }
        let o = &state.optimizer;
        for x in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay] {
            w.write_f64::<LE>(x)?;
        }
        w.write_u64::<LE>(o.step)?;
        write_store(w, &o.m)?;
        write_store(w, &o.v)?;
        w.write_all(&state.rng.get_seed())?;
        w.write_u64::<LE>(state.rng.get_stream())?;
        w.write_u128::<LE>(state.rng.get_word_pos())?;
        w.write_u64::<LE>(state.step)
    };
    io(w).map_err(ck)
}

pub fn read_state<R: Read, T: Scalar>(r: &mut R) -> Result<(ModelState<T>, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(ck)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LE>().map_err(ck)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut header: Header = serde_json::from_slice(&read_bytes(r, 1 << 26)?)?;
    header.tokenizer.rebuild_index();
    header.cfg.validate()?;
    let params = read_store(r)?;
    let momentum = read_store(r)?;
    let img_queue = read_queue(r)?;
    let txt_queue = read_queue(r)?;
    let report_queue = read_queue(r)?;
    let mut f = [0f64; 5];
    for x in &mut f {
        *x = r.read_f64::<LE>().map_err(ck)?;
    }
    let opt_step = r.read_u64::<LE>().map_err(ck)?;
    let m = read_store(r)?;
    let v = read_store(r)?;
    let optimizer = AdamW { lr: f[0], beta1: f[1], beta2: f[2], eps: f[3], weight_decay: f[4], step: opt_step, m, v };
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(ck)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.read_u64::<LE>().map_err(ck)?);
    rng.set_word_pos(r.read_u128::<LE>().map_err(ck)?);
    let step = r.read_u64::<LE>().map_err(ck)?;
    let state = ModelState {
        cfg: header.cfg,
        tokenizer: header.tokenizer,
        params,
        momentum,
        img_queue,
        txt_queue,
        report_queue,
        optimizer,
        rng,
        step,
    };
    Ok((state, header.meta))
}

pub fn save<T: Scalar>(path: &Path, state: &ModelState<T>, meta: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_state(&mut w, state, meta)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ModelState<T>, serde_json::Value)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_state(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QueueSizes;
    use rand::Rng;

    fn state() -> ModelState<f32> {
        let tok = Tokenizer::from_texts(["left pleural effusion", "normal heart"], 12);
        let mut s = ModelState::<f32>::new(EncoderConfig::tiny(), tok, QueueSizes { itc: 3, report: 4 }, 5).unwrap();
        let v = ndarray::array![[0.6f32, 0.8, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        s.report_queue.enqueue(v.view(), &[7, 9]).unwrap();
        s.optimizer.step = 3;
        s.optimizer.m.insert("embed.tok", Array2::from_elem((2, 2), 0.25));
        let _: u32 = s.rng.gen();
        s.step = 42;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let meta = serde_json::json!({"task": "pretrain"});
        let mut buf = Vec::new();
        write_state(&mut buf, &s, &meta).unwrap();
        let (mut back, m) = read_state::<_, f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.params, s.params);
        assert_eq!(back.momentum, s.momentum);
        assert_eq!(back.report_queue, s.report_queue);
        assert_eq!(back.img_queue, s.img_queue);
        assert_eq!(back.optimizer, s.optimizer);
        assert_eq!(back.tokenizer, s.tokenizer);
        assert_eq!(back.cfg, s.cfg);
        assert_eq!(back.step, 42);
        let mut orig = s.rng.clone();
        assert_eq!(back.rng.gen::<u64>(), orig.gen::<u64>());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let s = state();
        let mut buf = Vec::new();
        write_state(&mut buf, &s, &serde_json::Value::Null).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_state::<_, f32>(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let cut = &buf[..buf.len() / 2];
        assert!(read_state::<_, f32>(&mut &cut[..]).is_err());
    }
}

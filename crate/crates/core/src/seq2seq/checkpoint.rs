//! Model checkpoint files.
//!
//! All integers and floats are little-endian; matrices are row-major `f64`.
//!
//! ```text
//! magic      8 bytes  "SEQCCKPT"
//! version    u32      1
//! endianness u32      0x0A0B0C0D (reads back as 0x0D0C0B0A on a mismatch)
//! model      str      ModelConfig::to_text
//! run        str      free-form run metadata (the resolved run config)
//! src_vocab  list     source words by id
//! tgt_vocab  list     target words by id
//! table      u8 flag, then list of words, u64 rows, u64 dim, rows*dim f64
//! params     u64 count, then per matrix: name (u32 len + UTF-8), u64 rows,
//!            u64 cols, rows*cols f64
//! str  = u64 byte length + UTF-8
//! list = u64 count + count * (u32 byte length + UTF-8)
//! ```
//!
//! Writing the same model twice gives identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::tape::ParamSet;
use super::{ModelConfig, ModelError, Result, Seq2SeqModel};
use crate::embed::EmbeddingTable;

const MAGIC: &[u8; 8] = b"SEQCCKPT";
const VERSION: u32 = 1;
const ENDIAN_MARK: u32 = 0x0A0B_0C0D;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run_config: String,
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
    pub model: Seq2SeqModel,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u8(&mut self, x: u8) -> std::io::Result<()> {
        self.0.write_all(&[x])
    }
    fn u32(&mut self, x: u32) -> std::io::Result<()> {
        self.0.write_all(&x.to_le_bytes())
    }
    fn u64(&mut self, x: usize) -> std::io::Result<()> {
        self.0.write_all(&(x as u64).to_le_bytes())
    }
    fn text(&mut self, s: &str) -> std::io::Result<()> {
        self.u64(s.len())?;
        self.0.write_all(s.as_bytes())
    }
    fn word(&mut self, s: &str) -> std::io::Result<()> {
        self.u32(s.len() as u32)?;
        self.0.write_all(s.as_bytes())
    }
    fn words(&mut self, ws: &[String]) -> std::io::Result<()> {
        self.u64(ws.len())?;
        ws.iter().try_for_each(|w| self.word(w))
    }
    fn matrix<'a>(&mut self, values: impl Iterator<Item = &'a f64>) -> std::io::Result<()> {
        values.into_iter().try_for_each(|x| self.0.write_all(&x.to_le_bytes()))
    }
}

struct Reader<R: Read>(R);

fn corrupt(e: std::io::Error) -> ModelError {
    ModelError::Checkpoint(format!("truncated or unreadable: {e}"))
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(corrupt)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.bytes()?)).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
    fn utf8(&mut self, len: usize) -> Result<String> {
        let mut buf = vec![0u8; len];
        self.0.read_exact(&mut buf).map_err(corrupt)?;
        String::from_utf8(buf).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u64()?;
        self.utf8(n)
    }
    fn word(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }
    fn words(&mut self) -> Result<Vec<String>> {
        let n = self.u64()?;
        (0..n).map(|_| self.word()).collect()
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(self.bytes()?));
        }
        Array2::from_shape_vec((rows, cols), data).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, out: W) -> std::io::Result<()> {
    let mut w = Writer(BufWriter::new(out));
    w.0.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(ENDIAN_MARK)?;
    w.text(&ck.model.config().to_text())?;
    w.text(&ck.run_config)?;
    w.words(&ck.src_words)?;
    w.words(&ck.tgt_words)?;
    match ck.model.table() {
        Some(t) => {
            w.u8(1)?;
            w.words(t.words())?;
            w.u64(t.len())?;
            w.u64(t.dim())?;
            w.matrix(t.vectors().iter())?;
        }
        None => w.u8(0)?,
    }
    let params = ck.model.params();
    w.u64(params.len())?;
    for (name, value) in params.iter() {
        w.word(name)?;
        w.u64(value.nrows())?;
        w.u64(value.ncols())?;
        w.matrix(value.iter())?;
    }
    w.0.flush()
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader(input);
    if &r.bytes::<8>()? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    if r.u32()? != ENDIAN_MARK {
        return Err(ModelError::Checkpoint("endianness marker mismatch".into()));
    }
    let cfg = ModelConfig::from_text(&r.text()?)?;
    let run_config = r.text()?;
    let src_words = r.words()?;
    let tgt_words = r.words()?;
    let table = match r.u8()? {
        0 => None,
        1 => {
            let words = r.words()?;
            let rows = r.u64()?;
            let dim = r.u64()?;
            if rows != words.len() {
                return Err(ModelError::Checkpoint("table row count mismatch".into()));
            }
            Some(EmbeddingTable::new(words, r.matrix(rows, dim)?)?)
        }
        f => return Err(ModelError::Checkpoint(format!("bad table flag {f}"))),
    };
    let n = r.u64()?;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name = r.word()?;
        let rows = r.u64()?;
        let cols = r.u64()?;
        params.push(name, r.matrix(rows, cols)?);
    }
    let model = Seq2SeqModel::from_parts(cfg, params, table)?;
    Ok(Checkpoint { run_config, src_words, tgt_words, model })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let f = File::create(path).map_err(io)?;
    write_checkpoint(ck, f).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    read_checkpoint(BufReader::new(f))
}

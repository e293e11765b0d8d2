//! The FRST checkpoint file.
//!
//! ```text
//! "FRST" | u16 version
//! section*: tag [4]u8 | u64 payload length | payload | u32 crc32(tag | length | payload)
//! ```
//!
//! Sections, in write order: `CONF` (JSON configs and counters), `SCHD`
//! (beta, alpha, alpha_bar tables), `NORM` (normalization stats), `PI2T` and
//! `PT2I` (named f64 tensors), `MOMS` (AdamW moments), `RNGS` (generator
//! state). All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::dit::{GatedDit, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::params::ParamSet;
use crate::schedule::NoiseSchedule;
use crate::training::{TrainConfig, TrainState};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"FRST";
const FILE: &str = "FRST";
const SECTIONS: [&[u8; 4]; 7] = [b"CONF", b"SCHD", b"NORM", b"PI2T", b"PT2I", b"MOMS", b"RNGS"];

#[derive(Serialize, Deserialize)]
struct Header {
    train: TrainConfig,
    model_i2t: ModelConfig,
    model_t2i: ModelConfig,
    step: u64,
    epoch: usize,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn tensor(&mut self, t: &Array2<f64>) {
        self.u32(t.nrows() as u32);
        self.u32(t.ncols() as u32);
        for x in t.iter() {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn params(&mut self, p: &ParamSet) {
        self.u32(p.len() as u32);
        for (name, t) in p.names().iter().zip(p.tensors()) {
            self.u32(name.len() as u32);
            self.0.extend_from_slice(name.as_bytes());
            self.tensor(t);
        }
    }
    fn tensors(&mut self, ts: &[Array2<f64>]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &str) -> Self {
        Self {
            buf,
            pos: 0,
            section: section.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                file: FILE,
                section: self.section.clone(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        self.guard(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    /// Refuses counts that could not fit in the remaining bytes.
    fn guard(&self, n: usize, unit: usize) -> Result<()> {
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Truncated {
                file: FILE,
                section: self.section.clone(),
            });
        }
        Ok(())
    }
    fn tensor(&mut self) -> Result<Array2<f64>> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        self.guard(r.saturating_mul(c), 8)?;
        let v = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((r, c), v).unwrap())
    }
    fn params(&mut self) -> Result<ParamSet> {
        let n = self.u32()? as usize;
        self.guard(n, 12)?;
        let mut p = ParamSet::new();
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| self.format("parameter name is not UTF-8"))?
                .to_string();
            p.push(name, self.tensor()?);
        }
        Ok(p)
    }
    fn tensors(&mut self) -> Result<Vec<Array2<f64>>> {
        let n = self.u32()? as usize;
        self.guard(n, 8)?;
        (0..n).map(|_| self.tensor()).collect()
    }
    fn format(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            file: FILE,
            section: self.section.clone(),
            detail: detail.into(),
        }
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.format(format!("{} unread bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    let start = out.len();
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let header = Header {
        train: state.config.clone(),
        model_i2t: state.model_i2t.config().clone(),
        model_t2i: state.model_t2i.config().clone(),
        step: state.step,
        epoch: state.epoch,
    };
    section(&mut out, b"CONF", &serde_json::to_vec(&header)?);

    let mut w = Writer::default();
    w.f64s(&state.schedule.beta);
    w.f64s(&state.schedule.alpha);
    w.f64s(&state.schedule.alpha_bar);
    section(&mut out, b"SCHD", &w.0);

    let mut w = Writer::default();
    for s in [&state.norm_image, &state.norm_text] {
        w.f64s(&s.mean);
        w.f64s(&s.std);
    }
    section(&mut out, b"NORM", &w.0);

    for (tag, m) in [(b"PI2T", &state.model_i2t), (b"PT2I", &state.model_t2i)] {
        let mut w = Writer::default();
        w.params(m.params());
        section(&mut out, tag, &w.0);
    }

    let mut w = Writer::default();
    for m in [&state.moments_i2t, &state.moments_t2i] {
        w.tensors(&m.first);
        w.tensors(&m.second);
    }
    section(&mut out, b"MOMS", &w.0);

    let mut w = Writer::default();
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    section(&mut out, b"RNGS", &w.0);
    Ok(out)
}

/// Splits the file into verified section payloads, in the fixed order.
fn sections(bytes: &[u8]) -> Result<Vec<&[u8]>> {
    if bytes.len() < 6 {
        return Err(Error::Truncated {
            file: FILE,
            section: "header".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            file: FILE,
            section: "header".into(),
            detail: "magic is not FRST".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            file: FILE,
            section: "header".into(),
            detail: format!("unsupported version {version}"),
        });
    }
    let mut pos = 6;
    let mut out = Vec::new();
    for tag in SECTIONS {
        let name = String::from_utf8_lossy(tag).into_owned();
        let truncated = || Error::Truncated {
            file: FILE,
            section: name.clone(),
        };
        if bytes.len() - pos < 12 {
            return Err(truncated());
        }
        if &bytes[pos..pos + 4] != tag {
            return Err(Error::Format {
                file: FILE,
                section: name.clone(),
                detail: format!("found tag {:?}", String::from_utf8_lossy(&bytes[pos..pos + 4])),
            });
        }
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| (pos + 12).checked_add(l))
            .filter(|&e| e.checked_add(4).is_some_and(|e4| e4 <= bytes.len()))
            .ok_or_else(truncated)?;
        let crc = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
        if crc != crc32fast::hash(&bytes[pos..end]) {
            return Err(Error::Crc { file: FILE, section: name });
        }
        out.push(&bytes[pos + 12..end]);
        pos = end + 4;
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            file: FILE,
            section: "RNGS".into(),
            detail: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let s = sections(bytes)?;
    let header: Header = serde_json::from_slice(s[0]).map_err(|e| Error::Format {
        file: FILE,
        section: "CONF".into(),
        detail: e.to_string(),
    })?;

    let mut r = Reader::new(s[1], "SCHD");
    let schedule = NoiseSchedule {
        beta: r.f64s()?,
        alpha: r.f64s()?,
        alpha_bar: r.f64s()?,
    };
    r.finish()?;
    let t = schedule.beta.len();
    if t == 0 || schedule.alpha.len() != t || schedule.alpha_bar.len() != t {
        return Err(r.format("schedule tables differ in length"));
    }
    if t != header.train.schedule.steps {
        return Err(r.format(format!("{t} steps stored, config says {}", header.train.schedule.steps)));
    }

    let mut r = Reader::new(s[2], "NORM");
    let mut norm = || -> Result<NormStats> {
        Ok(NormStats {
            mean: r.f64s()?,
            std: r.f64s()?,
        })
    };
    let (norm_image, norm_text) = (norm()?, norm()?);
    r.finish()?;
    for (n, d) in [(&norm_image, header.model_t2i.d_feature), (&norm_text, header.model_i2t.d_feature)] {
        if n.mean.len() != d || n.std.len() != d {
            return Err(r.format("normalization width does not match the models"));
        }
    }

    let mut models = Vec::new();
    for (i, (tag, cfg)) in [("PI2T", &header.model_i2t), ("PT2I", &header.model_t2i)].into_iter().enumerate() {
        let mut r = Reader::new(s[3 + i], tag);
        let p = r.params()?;
        r.finish()?;
        let model = GatedDit::from_params(cfg.clone(), p).map_err(|e| r.format(e.to_string()))?;
        models.push(model);
    }
    let model_t2i = models.pop().unwrap();
    let model_i2t = models.pop().unwrap();

    let mut r = Reader::new(s[5], "MOMS");
    let moments_i2t = Moments {
        first: r.tensors()?,
        second: r.tensors()?,
    };
    let moments_t2i = Moments {
        first: r.tensors()?,
        second: r.tensors()?,
    };
    r.finish()?;
    if !moments_i2t.matches(model_i2t.params()) || !moments_t2i.matches(model_t2i.params()) {
        return Err(r.format("moment shapes do not match parameters"));
    }

    let mut r = Reader::new(s[6], "RNGS");
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    r.finish()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        config: header.train,
        schedule,
        model_i2t,
        model_t2i,
        moments_i2t,
        moments_t2i,
        step: header.step,
        epoch: header.epoch,
        rng,
        norm_image,
        norm_text,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{ArchConfig, TrainData};
    use ndarray::Array2;

    fn state() -> TrainState {
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            model: ArchConfig {
                d_model: 8,
                depth: 1,
                n_heads: 2,
                n_tokens: 2,
                ..ArchConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(cfg, NormStats::identity(4), NormStats::identity(2)).unwrap();
        s.norm_image.mean[1] = 0.25;
        let data = TrainData {
            image: Array2::from_shape_fn((8, 4), |(i, j)| ((i * 4 + j) as f64).sin()),
            text: Array2::from_shape_fn((8, 2), |(i, j)| ((i + 3 * j) as f64).cos()),
        };
        s.run_until(&data, 2).unwrap();
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = encode_checkpoint(&s).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert!(back == s);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn every_corrupted_section_is_named() {
        let bytes = encode_checkpoint(&state()).unwrap();
        let mut pos = 6;
        for tag in SECTIONS {
            let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap()) as usize;
            let mut bad = bytes.clone();
            bad[pos + 12 + len / 2] ^= 0x10;
            match decode_checkpoint(&bad) {
                Err(Error::Crc { section, .. }) => assert_eq!(section.as_bytes(), tag),
                other => panic!("expected CRC error for {tag:?}, got {other:?}"),
            }
            pos += 16 + len;
        }
    }

    #[test]
    fn truncation_and_bad_headers_fail_cleanly() {
        let bytes = encode_checkpoint(&state()).unwrap();
        for cut in [0, 3, 6, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { section, .. }) if section == "header"));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { .. })));
    }
}

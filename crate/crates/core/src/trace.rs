//! Recorded all-layer logits, replayable through [`ReplayProvider`].
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! "DFDT"                      magic, 4 bytes
//! version: u32                currently 1
//! num_layers, vocab_size,
//! d_model, param_count: u64
//! name_len: u16, name: UTF-8
//! float_width: u32            4 (f32) or 8 (f64)
//! prompt_len: u32, prompt token ids: u32 each
//! step_count: u32
//! per step: token id u32, then num_layers * vocab_size floats
//!           (layer-major, layer 1 first, output layer last)
//! ```
//!
//! The JSONL variant, meant for hand-written fixtures, holds a header object
//! `{"format": "dfdt-jsonl", "version": 1, "meta": {..}, "context_tokens": [..]}`
//! on the first line and one `{"token": id, "logits": [[..], ..]}` object per
//! step after it. [`read_trace`] picks the variant from the leading bytes.
//!
//! [`ReplayProvider`]: crate::provider::ReplayProvider

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::argmax;
use crate::error::{Error, Result};
use crate::provider::{LayerLogits, LayerProvider, ModelMeta};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"DFDT";
pub const VERSION: u32 = 1;
const JSONL_FORMAT: &str = "dfdt-jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<F> {
    /// Token emitted after this step.
    pub token: u32,
    pub logits: LayerLogits<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace<F> {
    pub meta: ModelMeta,
    pub context_tokens: Vec<u32>,
    pub steps: Vec<TraceStep<F>>,
}

impl<F: Real> Trace<F> {
    pub fn new(meta: ModelMeta, context_tokens: Vec<u32>, steps: Vec<TraceStep<F>>) -> Result<Self> {
        let trace = Self {
            meta,
            context_tokens,
            steps,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let v = self.meta.vocab_size;
        if let Some(&bad) = self.context_tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::input(format!(
                "prompt token {bad} outside vocabulary of size {v}"
            )));
        }
        let mut prev = None;
        for (i, s) in self.steps.iter().enumerate() {
            if s.token as usize >= v {
                return Err(Error::input(format!("step {i}: token {} outside vocabulary", s.token)));
            }
            if s.logits.num_layers() != self.meta.num_layers || s.logits.vocab_size() != v {
                return Err(Error::input(format!(
                    "step {i}: logits shape {}x{} does not match meta {}x{v}",
                    s.logits.num_layers(),
                    s.logits.vocab_size(),
                    self.meta.num_layers
                )));
            }
            if prev.is_some_and(|p| s.logits.step_index() <= p) {
                return Err(Error::input(format!("step {i}: step indices not increasing")));
            }
            prev = Some(s.logits.step_index());
        }
        Ok(())
    }

    /// Bytes in the binary encoding before the first step record.
    pub fn header_len(&self) -> usize {
        4 + 4 + 4 * 8 + 2 + self.meta.name.len() + 4 + 4 + 4 * self.context_tokens.len() + 4
    }

    pub fn write_binary<W: Write>(&self, mut w: W, float_width: u32) -> Result<()> {
        if float_width != 4 && float_width != 8 {
            return Err(Error::arg(format!("float width must be 4 or 8, got {float_width}")));
        }
        let name = self.meta.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::arg("model name longer than 65535 bytes"))?;
        let mut buf = Vec::with_capacity(self.header_len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.meta.num_layers as u64,
            self.meta.vocab_size as u64,
            self.meta.d_model as u64,
            self.meta.param_count,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&float_width.to_le_bytes());
        buf.extend_from_slice(&len_u32(self.context_tokens.len())?.to_le_bytes());
        for t in &self.context_tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        buf.extend_from_slice(&len_u32(self.steps.len())?.to_le_bytes());
        w.write_all(&buf)?;

        for s in &self.steps {
            buf.clear();
            buf.extend_from_slice(&s.token.to_le_bytes());
            for &x in s.logits.as_flat() {
                if float_width == 4 {
                    buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
                } else {
                    buf.extend_from_slice(&x.as_f64().to_le_bytes());
                }
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = JsonlHeader {
            format: JSONL_FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
            context_tokens: self.context_tokens.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.steps {
            let line = JsonlStep {
                token: s.token,
                logits: s
                    .logits
                    .rows()
                    .map(|r| r.iter().map(|v| v.as_f64()).collect())
                    .collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, float_width: u32) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(file, float_width)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::arg(format!("length {n} does not fit in u32")))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlHeader {
    format: String,
    version: u32,
    meta: ModelMeta,
    context_tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlStep {
    token: u32,
    logits: Vec<Vec<f64>>,
}

/// Reads either encoding, detected from the leading bytes.
pub fn read_trace<F: Real, R: Read>(mut r: R) -> Result<Trace<F>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_trace(&bytes)
}

pub fn load_trace<F: Real>(path: impl AsRef<Path>) -> Result<Trace<F>> {
    decode_trace(&std::fs::read(path)?)
}

pub fn decode_trace<F: Real>(bytes: &[u8]) -> Result<Trace<F>> {
    if bytes.starts_with(MAGIC) {
        return decode_binary(bytes);
    }
    match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
        Some(b'{') => decode_jsonl(bytes),
        _ => Err(Error::Format(format!(
            "bad magic {:?}, expected {:?} or a JSONL header",
            String::from_utf8_lossy(&bytes[..bytes.len().min(4)]),
            std::str::from_utf8(MAGIC).unwrap()
        ))),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Corrupt {
                offset: self.at as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.at
                ),
            });
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let offset = self.at as u64;
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corrupt {
            offset,
            detail: format!("{what} does not fit in usize"),
        })
    }
}

fn decode_binary<F: Real>(bytes: &[u8]) -> Result<Trace<F>> {
    let mut c = Cursor { bytes, at: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let num_layers = c.usize("num_layers")?;
    let vocab_size = c.usize("vocab_size")?;
    let d_model = c.usize("d_model")?;
    let param_count = c.u64("param_count")?;
    let name_len = c.u16("name length")? as usize;
    let name_at = c.at as u64;
    let name = std::str::from_utf8(c.take(name_len, "model name")?)
        .map_err(|e| Error::Corrupt {
            offset: name_at,
            detail: format!("model name is not UTF-8: {e}"),
        })?
        .to_string();
    let meta = ModelMeta {
        num_layers,
        vocab_size,
        d_model,
        param_count,
        name,
    };
    meta.validate().map_err(|e| Error::Format(e.to_string()))?;
    let width = c.u32("float width")?;
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unsupported float width {width}")));
    }
    let prompt_len = c.u32("prompt length")? as usize;
    let mut context_tokens = Vec::with_capacity(prompt_len.min(1 << 20));
    for _ in 0..prompt_len {
        context_tokens.push(c.u32("prompt token")?);
    }
    let step_count = c.u32("step count")? as usize;
    let cells = num_layers
        .checked_mul(vocab_size)
        .ok_or_else(|| Error::Format("num_layers * vocab_size overflows".into()))?;
    let mut steps = Vec::with_capacity(step_count.min(1 << 16));
    for i in 0..step_count {
        let token = c.u32("step token")?;
        let raw = c.take(cells * width as usize, "step logits")?;
        let data: Vec<F> = if width == 4 {
            raw.chunks_exact(4)
                .map(|b| F::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|b| F::of(f64::from_le_bytes(b.try_into().unwrap())))
                .collect()
        };
        let logits = LayerLogits::from_flat(i, num_layers, vocab_size, data)?;
        steps.push(TraceStep { token, logits });
    }
    if c.at != bytes.len() {
        return Err(Error::Corrupt {
            offset: c.at as u64,
            detail: format!("{} trailing bytes after last step", bytes.len() - c.at),
        });
    }
    Trace::new(meta, context_tokens, steps)
}

fn decode_jsonl<F: Real>(bytes: &[u8]) -> Result<Trace<F>> {
    let mut lines = bytes.lines().enumerate().filter(|(_, l)| match l {
        Ok(s) => !s.trim().is_empty(),
        Err(_) => true,
    });
    let (_, first) = lines.next().ok_or_else(|| Error::Format("empty trace".into()))?;
    let header: JsonlHeader =
        serde_json::from_str(&first?).map_err(|e| Error::Format(format!("bad JSONL header: {e}")))?;
    if header.format != JSONL_FORMAT {
        return Err(Error::Format(format!("unknown format tag {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported trace version {}", header.version)));
    }
    let mut steps = Vec::new();
    for (lineno, line) in lines {
        let step: JsonlStep =
            serde_json::from_str(&line?).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let rows = step
            .logits
            .into_iter()
            .map(|r| r.into_iter().map(F::of).collect())
            .collect();
        let logits = LayerLogits::new(steps.len(), rows)?;
        steps.push(TraceStep {
            token: step.token,
            logits,
        });
    }
    Trace::new(header.meta, header.context_tokens, steps)
}

/// Greedily decodes `num_steps` tokens from `provider`, recording every
/// step's logits.
pub fn record_greedy<F: Real, P: LayerProvider<F>>(
    provider: &mut P,
    prompt: &[u32],
    num_steps: usize,
) -> Result<Trace<F>> {
    if prompt.is_empty() {
        return Err(Error::arg("prompt is empty"));
    }
    let meta = provider.meta().clone();
    let mut context = prompt.to_vec();
    let mut steps = Vec::with_capacity(num_steps);
    for i in 0..num_steps {
        let logits = provider.step(&context)?.with_step_index(i);
        let token = argmax(logits.final_row());
        context.push(token);
        steps.push(TraceStep { token, logits });
    }
    Trace::new(meta, prompt.to_vec(), steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::provider::BuiltinProvider;

    fn sample_trace(steps: usize) -> Trace<f64> {
        let mut p = BuiltinProvider::<f64>::from_config(ModelConfig::default()).unwrap();
        record_greedy(&mut p, &[3, 14, 15], steps).unwrap()
    }

    #[test]
    fn binary_payload_size() {
        let t = sample_trace(3);
        let mut buf = Vec::new();
        t.write_binary(&mut buf, 4).unwrap();
        assert_eq!(buf.len(), t.header_len() + 3 * (4 + 4 * 64 * 4));
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let t = sample_trace(4);
        let mut buf = Vec::new();
        t.write_binary(&mut buf, 8).unwrap();
        let back: Trace<f64> = decode_trace(&buf).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn f32_round_trip_is_exact_at_f32() {
        let t: Trace<f32> = {
            let wide = sample_trace(2);
            let steps = wide
                .steps
                .iter()
                .map(|s| TraceStep {
                    token: s.token,
                    logits: s.logits.cast(),
                })
                .collect();
            Trace::new(wide.meta.clone(), wide.context_tokens.clone(), steps).unwrap()
        };
        let mut buf = Vec::new();
        t.write_binary(&mut buf, 4).unwrap();
        let back: Trace<f32> = decode_trace(&buf).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn jsonl_round_trip() {
        let t = sample_trace(2);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let back: Trace<f64> = decode_trace(&buf).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let t = sample_trace(1);
        let mut buf = Vec::new();
        t.write_binary(&mut buf, 4).unwrap();
        buf[0] = b'X';
        assert!(matches!(decode_trace::<f64>(&buf), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let t = sample_trace(1);
        let mut buf = Vec::new();
        t.write_binary(&mut buf, 4).unwrap();
        buf[4] = 9;
        assert!(matches!(decode_trace::<f64>(&buf), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_reports_offset() {
        let t = sample_trace(2);
        let mut buf = Vec::new();
        t.write_binary(&mut buf, 4).unwrap();
        let cut = buf.len() - 10;
        match decode_trace::<f64>(&buf[..cut]) {
            Err(Error::Corrupt { offset, .. }) => {
                // second step's logits start after its token id
                assert_eq!(offset as usize, t.header_len() + (4 + 1024) + 4);
            }
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn hand_written_jsonl_fixture() {
        let text = r#"{"format":"dfdt-jsonl","version":1,"meta":{"num_layers":2,"vocab_size":3,"d_model":1,"param_count":0,"name":"hand"},"context_tokens":[0]}
{"token":2,"logits":[[0,0,0],[0,0,5]]}
"#;
        let t: Trace<f64> = decode_trace(text.as_bytes()).unwrap();
        assert_eq!(t.steps.len(), 1);
        assert_eq!(t.steps[0].logits.final_row(), &[0.0, 0.0, 5.0]);
    }
}

//! Model checkpoints.
//!
//! Two encodings of the same content (architecture plus named parameter
//! arrays with shapes):
//!
//! * JSON, with every value written as a C99-style hex-float string
//!   (`"0x1.8p+1"`), so decimal rounding never enters.
//! * A flat little-endian binary: magic `AEPGCKP1`, architecture as four
//!   `u64`, parameter count `u64`, then per parameter: name length `u64`,
//!   UTF-8 name, rank `u64`, dims `u64`×rank, values `f64`×numel.
//!
//! Both round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, MlpPolicy};
use crate::tensor::Tensor;

const BINARY_MAGIC: &[u8; 8] = b"AEPGCKP1";
const JSON_FORMAT: &str = "aepg-checkpoint-v1";

/// Formats `v` as a hex-float literal, e.g. `0x1.8p+1` for 3.0.
pub fn format_hex_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        (0, -1022)
    } else {
        (1, exp_bits - 1023)
    };
    let mut frac = format!("{mantissa:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    let exp_sign = if exp < 0 { '-' } else { '+' };
    if frac.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{frac}p{exp_sign}{}", exp.abs())
    }
}

/// Parses the output of [`format_hex_float`].
pub fn parse_hex_float(s: &str) -> Option<f64> {
    match s {
        "nan" => return Some(f64::NAN),
        "inf" => return Some(f64::INFINITY),
        "-inf" => return Some(f64::NEG_INFINITY),
        _ => {}
    }
    let (negative, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x")?;
    let (mant, exp) = rest.split_once('p')?;
    let exp: i64 = exp.parse().ok()?;
    let (lead, frac) = match mant.split_once('.') {
        Some((l, f)) => (l, f),
        None => (mant, ""),
    };
    if frac.len() > 13 || frac.is_empty() && mant.contains('.') {
        return None;
    }
    let lead: u64 = match lead {
        "0" => 0,
        "1" => 1,
        _ => return None,
    };
    let frac_bits = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).ok()? << (4 * (13 - frac.len()))
    };
    let sign_bit = (negative as u64) << 63;
    let bits = match lead {
        0 if frac_bits == 0 && exp == 0 => 0,
        0 if exp == -1022 => frac_bits,
        1 if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << 52) | frac_bits,
        _ => return None,
    };
    Some(f64::from_bits(sign_bit | bits))
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonCheckpoint {
    format: String,
    architecture: Architecture,
    params: Vec<JsonParam>,
}

pub fn to_json(model: &MlpPolicy) -> Result<String> {
    let ckpt = JsonCheckpoint {
        format: JSON_FORMAT.into(),
        architecture: model.architecture(),
        params: model
            .named_params()
            .into_iter()
            .map(|(name, t)| JsonParam {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| format_hex_float(v)).collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&ckpt)?)
}

pub fn from_json(s: &str) -> Result<MlpPolicy> {
    let ckpt: JsonCheckpoint = serde_json::from_str(s)?;
    if ckpt.format != JSON_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", ckpt.format)));
    }
    let mut named = Vec::with_capacity(ckpt.params.len());
    for p in ckpt.params {
        let data = p
            .data
            .iter()
            .map(|s| parse_hex_float(s).ok_or_else(|| Error::Checkpoint(format!("bad hex float {s:?} in {}", p.name))))
            .collect::<Result<Vec<_>>>()?;
        named.push((p.name, Tensor::new(p.shape, data)?));
    }
    MlpPolicy::from_named(ckpt.architecture, named)
}

pub fn to_binary(model: &MlpPolicy) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    let arch = model.architecture();
    for v in [arch.input_dim, arch.depth, arch.width, arch.adapter_rank] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_binary(bytes: &[u8]) -> Result<MlpPolicy> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Checkpoint("bad binary magic".into()));
    }
    let mut u = || -> Result<usize> {
        let mut b = [0u8; 8];
        read_exact(&mut r, &mut b)?;
        Ok(u64::from_le_bytes(b) as usize)
    };
    let arch = Architecture {
        input_dim: u()?,
        depth: u()?,
        width: u()?,
        adapter_rank: u()?,
    };
    let count = u()?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u64(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        named.push((name, Tensor::new(shape, data)?));
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    MlpPolicy::from_named(arch, named)
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated binary checkpoint".into()))
}

/// Saves as JSON when the extension is `.json`, binary otherwise.
pub fn save(model: &MlpPolicy, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        f.write_all(to_json(model)?.as_bytes())?;
    } else {
        f.write_all(&to_binary(model))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<MlpPolicy> {
    let bytes = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let s = String::from_utf8(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        from_json(&s)
    } else {
        from_binary(&bytes)
    }
}

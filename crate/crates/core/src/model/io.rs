//! Instance serialization.
//!
//! Two on-disk forms share the same field order:
//!
//! - a JSON document `{n, d, alpha, pi, seed, planted, pools, histograms}`
//!   where `pools` is a row-major '0'/'1' bitstring of length `m * n`;
//! - a compact little-endian binary form for large `n` (magic `HQPB`,
//!   version 1), with pools packed eight entries per byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::HqpInstance;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct InstanceJson {
    n: usize,
    d: usize,
    alpha: f64,
    pi: Vec<f64>,
    seed: u64,
    planted: Vec<usize>,
    /// Row-major '0'/'1' characters, length m * n.
    pools: String,
    histograms: Vec<Vec<u64>>,
}

const BINARY_MAGIC: &[u8; 4] = b"HQPB";
const BINARY_VERSION: u32 = 1;

impl HqpInstance {
    pub fn to_json(&self) -> Result<String> {
        let mut pools = String::with_capacity(self.m * self.n);
        for a in 0..self.m {
            for i in 0..self.n {
                pools.push(if self.pools[(a, i)] != 0 { '1' } else { '0' });
            }
        }
        let doc = InstanceJson {
            n: self.n,
            d: self.d,
            alpha: self.alpha,
            pi: self.pi.clone(),
            seed: self.seed,
            planted: self.planted.clone(),
            pools,
            histograms: (0..self.m)
                .map(|a| (0..self.d).map(|r| self.histograms[(a, r)]).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: InstanceJson = serde_json::from_str(text)?;
        if doc.pi.len() != doc.d {
            return Err(Error::InvalidParam("pi length must equal d".into()));
        }
        if doc.planted.len() != doc.n {
            return Err(Error::InvalidParam("planted length must equal n".into()));
        }
        let m = doc.histograms.len();
        if doc.pools.len() != m * doc.n {
            return Err(Error::InvalidParam(format!(
                "pools bitstring has length {}, expected m*n = {}",
                doc.pools.len(),
                m * doc.n
            )));
        }
        let mut pools = Array2::<u8>::zeros((m, doc.n));
        for (k, ch) in doc.pools.bytes().enumerate() {
            let v = match ch {
                b'0' => 0,
                b'1' => 1,
                other => {
                    return Err(Error::InvalidParam(format!(
                        "pools bitstring contains invalid byte {other:#x}"
                    )))
                }
            };
            pools[(k / doc.n, k % doc.n)] = v;
        }
        if doc.planted.iter().any(|&r| r >= doc.d) {
            return Err(Error::InvalidParam("planted category out of range".into()));
        }
        let inst = HqpInstance::from_parts(doc.planted, pools, doc.d, doc.alpha, doc.pi, doc.seed);
        // The stored histograms must match the recomputed exact counts.
        for a in 0..m {
            for r in 0..doc.d {
                if inst.histograms[(a, r)] != doc.histograms[a][r] {
                    return Err(Error::InvalidParam(format!(
                        "stored histogram ({a},{r}) = {} disagrees with recomputed {}",
                        doc.histograms[a][r],
                        inst.histograms[(a, r)]
                    )));
                }
            }
        }
        Ok(inst)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        out.extend_from_slice(&(self.m as u64).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for &p in &self.pi {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for &r in &self.planted {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        let bits = self.m * self.n;
        let mut packed = vec![0u8; bits.div_ceil(8)];
        for a in 0..self.m {
            for i in 0..self.n {
                if self.pools[(a, i)] != 0 {
                    let k = a * self.n + i;
                    packed[k / 8] |= 1 << (k % 8);
                }
            }
        }
        out.extend_from_slice(&packed);
        for a in 0..self.m {
            for r in 0..self.d {
                out.extend_from_slice(&self.histograms[(a, r)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != BINARY_MAGIC {
            return Err(Error::MalformedBinary("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != BINARY_VERSION {
            return Err(Error::MalformedBinary(format!(
                "unsupported version {version}"
            )));
        }
        let n = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        let m = cur.u64()? as usize;
        let alpha = cur.f64()?;
        let mut pi = Vec::with_capacity(d);
        for _ in 0..d {
            pi.push(cur.f64()?);
        }
        let seed = cur.u64()?;
        let mut planted = Vec::with_capacity(n);
        for _ in 0..n {
            let r = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            if r >= d {
                return Err(Error::MalformedBinary(
                    "planted category out of range".into(),
                ));
            }
            planted.push(r);
        }
        let bits = m * n;
        let packed = cur.take(bits.div_ceil(8))?;
        let mut pools = Array2::<u8>::zeros((m, n));
        for a in 0..m {
            for i in 0..n {
                let k = a * n + i;
                pools[(a, i)] = (packed[k / 8] >> (k % 8)) & 1;
            }
        }
        let mut histograms = Array2::<u64>::zeros((m, d));
        for a in 0..m {
            for r in 0..d {
                histograms[(a, r)] = cur.u64()?;
            }
        }
        let inst = HqpInstance::from_parts(planted, pools, d, alpha, pi, seed);
        if inst.histograms != histograms {
            return Err(Error::MalformedBinary(
                "stored histograms disagree with recomputed counts".into(),
            ));
        }
        Ok(inst)
    }

    /// Write to a path; `.bin` extensions get the binary form, anything else
    /// the JSON document.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        if path.extension().is_some_and(|e| e == "bin") {
            file.write_all(&self.to_binary())?;
        } else {
            file.write_all(self.to_json()?.as_bytes())?;
        }
        Ok(())
    }

    /// Load from a path, sniffing the binary magic.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            Self::from_json(std::str::from_utf8(&bytes).map_err(|_| {
                Error::MalformedBinary("file is neither binary nor UTF-8 JSON".into())
            })?)
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::MalformedBinary("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

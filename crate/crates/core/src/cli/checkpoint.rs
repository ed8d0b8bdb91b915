//! Checkpoint container.
//!
//! Little-endian layout, strings as `u32 length | utf-8`:
//!
//! ```text
//! "RIVK" | version u32 | model u8 | epoch u64 | config (toml string)
//! n_params u32 { name | ndim u8 | dims u64.. | f64.. }
//! n_opts u32 { name | steps u64 | lr f64 | n u32 { param name | len u64 | m f64.. | v f64.. } }
//! has_rng u8 [ seed u64 | stream u64 | word_pos u128 ]
//! history (json string)
//! crc32 u32 over all preceding bytes
//! ```

use std::path::Path;

use super::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::numkit::{AdamState, ParamStore, RngState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RIVK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub type NamedArray = (String, Vec<usize>, Vec<f64>);
pub type Moments = (String, Vec<f64>, Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub name: String,
    pub step_count: u64,
    pub learning_rate: f64,
    pub moments: Vec<Moments>,
}

impl OptimizerSnapshot {
    pub fn capture(name: &str, opt: &AdamState, store: &ParamStore) -> Self {
        Self {
            name: name.to_string(),
            step_count: opt.step_count,
            learning_rate: opt.config.learning_rate,
            moments: opt.export(store),
        }
    }

    pub fn restore(&self, opt: &mut AdamState, store: &ParamStore) -> Result<()> {
        opt.step_count = self.step_count;
        opt.set_learning_rate(self.learning_rate);
        opt.import(store, &self.moments)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    /// completed epochs
    pub epoch: usize,
    pub config: RunConfig,
    pub params: Vec<NamedArray>,
    pub optimizers: Vec<OptimizerSnapshot>,
    pub rng: Option<RngState>,
    /// training history as JSON
    pub history: String,
}

impl Checkpoint {
    pub fn optimizer(&self, name: &str) -> Result<&OptimizerSnapshot> {
        self.optimizers
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no optimizer `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.0.push(self.model.tag());
        w.u64(self.epoch as u64);
        w.str(&self.config.to_toml());
        w.u32(self.params.len() as u32);
        for (name, shape, data) in &self.params {
            w.str(name);
            w.0.push(shape.len() as u8);
            for &d in shape {
                w.u64(d as u64);
            }
            w.f64s(data);
        }
        w.u32(self.optimizers.len() as u32);
        for o in &self.optimizers {
            w.str(&o.name);
            w.u64(o.step_count);
            w.0.extend(o.learning_rate.to_le_bytes());
            w.u32(o.moments.len() as u32);
            for (name, m, v) in &o.moments {
                w.str(name);
                w.u64(m.len() as u64);
                w.f64s(m);
                w.f64s(v);
            }
        }
        match self.rng {
            Some(s) => {
                w.0.push(1);
                w.u64(s.seed);
                w.u64(s.stream);
                w.0.extend(s.word_pos.to_le_bytes());
            }
            None => w.0.push(0),
        }
        w.str(&self.history);
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(fmt_err(0, "checkpoint too short"));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt_err(0, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(
                4,
                &format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(fmt_err(body.len() as u64, "checkpoint checksum mismatch"));
        }
        let mut r = Reader {
            bytes: body,
            pos: 8,
        };
        let tag = r.take(1)?[0];
        let model = ModelKind::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| fmt_err(8, "unknown model tag"))?;
        let epoch = r.u64()? as usize;
        let config = RunConfig::from_toml_overlay(&r.str()?, None, None)?;
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            params.push((name, shape, data));
        }
        let mut optimizers = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let step_count = r.u64()?;
            let learning_rate = r.f64s(1)?[0];
            let mut moments = Vec::new();
            for _ in 0..r.u32()? {
                let pname = r.str()?;
                let n = r.u64()? as usize;
                let m = r.f64s(n)?;
                let v = r.f64s(n)?;
                moments.push((pname, m, v));
            }
            optimizers.push(OptimizerSnapshot {
                name,
                step_count,
                learning_rate,
                moments,
            });
        }
        let rng = match r.take(1)?[0] {
            0 => None,
            _ => {
                let seed = r.u64()?;
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState {
                    seed,
                    stream,
                    word_pos,
                })
            }
        };
        let history = r.str()?;
        if r.pos != body.len() {
            return Err(fmt_err(r.pos as u64, "trailing bytes in checkpoint"));
        }
        Ok(Self {
            model,
            epoch,
            config,
            params,
            optimizers,
            rng,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format {
            offset: 0,
            detail: format!("cannot read checkpoint {}: {e}", path.display()),
        })?;
        Self::decode(&bytes)
    }
}

fn fmt_err(offset: u64, detail: &str) -> Error {
    Error::Format {
        offset,
        detail: detail.to_string(),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| fmt_err(self.pos as u64, "truncated checkpoint"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos as u64;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| fmt_err(at, "invalid utf-8 in checkpoint"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| fmt_err(self.pos as u64, "oversized array"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatasetKind;

    fn sample() -> Checkpoint {
        Checkpoint {
            model: ModelKind::Rbivae,
            epoch: 17,
            config: RunConfig::defaults(DatasetKind::Sprites, ModelKind::Rbivae),
            params: vec![
                (
                    "e1.l0.weight".into(),
                    vec![2, 3],
                    vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 3.0],
                ),
                ("reg.log_c".into(), vec![1], vec![(0.01f64).ln()]),
            ],
            optimizers: vec![OptimizerSnapshot {
                name: "model".into(),
                step_count: 99,
                learning_rate: 2.5e-4,
                moments: vec![("e1.l0.weight".into(), vec![1.0; 6], vec![2.0; 6])],
            }],
            rng: Some(RngState {
                seed: 3,
                stream: 9,
                word_pos: (1u128 << 100) + 5,
            }),
            history: "[{\"epoch\":0}]".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let bits = |c: &Checkpoint| {
            c.params
                .iter()
                .flat_map(|p| p.2.iter().map(|x| x.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&c));
        assert_eq!(back.encode(), c.encode());
    }

    #[test]
    fn version_and_corruption_are_rejected() {
        let bytes = sample().encode();
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(
            Checkpoint::decode(&v),
            Err(Error::Format { offset: 4, .. })
        ));
        let mut c = bytes.clone();
        let k = c.len() / 2;
        c[k] ^= 1;
        assert!(matches!(Checkpoint::decode(&c), Err(Error::Format { .. })));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::decode(b"RIVD\x01\0\0\0\0\0\0\0").is_err());
    }
}

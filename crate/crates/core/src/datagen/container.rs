//! Binary dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! "RIVD" | version u32 | kind u8 | dtype u8 | shared_test u8 | 0u8
//! seed u64 | x1_dim u32 | x2_dim u32 | factor_dim u32 | n_train u64 | n_test u64
//! train: x1, x2 (dtype), factors (f64)   test: same, absent when shared
//! crc32 u32 over all preceding bytes
//! ```
//!
//! dtype 0 stores f64; dtype 1 stores bytes `b` meaning `b / 255`, used when
//! that is exact for every value (binary sprites, MNIST pixels).

use std::path::Path;
use std::sync::Arc;

use super::{DatasetKind, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const CONTAINER_MAGIC: [u8; 4] = *b"RIVD";
pub const CONTAINER_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

fn byte_exact(data: &[f64]) -> bool {
    data.iter().all(|&v| {
        let b = (v * 255.0).round();
        (0.0..=255.0).contains(&b) && (b as u8) as f64 / 255.0 == v
    })
}

fn put_values(out: &mut Vec<u8>, data: &[f64], dtype: u8) {
    if dtype == DTYPE_U8 {
        out.extend(data.iter().map(|&v| (v * 255.0).round() as u8));
    } else {
        for v in data {
            out.extend(v.to_le_bytes());
        }
    }
}

pub fn encode_dataset(d: &PairedDataset) -> Vec<u8> {
    let shared = d.test_is_train();
    let splits: Vec<&Split> = if shared {
        vec![&d.train]
    } else {
        vec![&d.train, &d.test]
    };
    let dtype = if splits
        .iter()
        .all(|s| byte_exact(s.x1.data()) && byte_exact(s.x2.data()))
    {
        DTYPE_U8
    } else {
        DTYPE_F64
    };
    let fdim = d.train.factors.as_ref().map_or(0, |f| f.row_len());
    let mut out = Vec::new();
    out.extend(CONTAINER_MAGIC);
    out.extend(CONTAINER_VERSION.to_le_bytes());
    out.extend([d.kind.tag(), dtype, shared as u8, 0]);
    out.extend(d.seed.to_le_bytes());
    for v in [d.x1_dim(), d.x2_dim(), fdim] {
        out.extend((v as u32).to_le_bytes());
    }
    out.extend((d.train.len() as u64).to_le_bytes());
    out.extend((if shared { 0 } else { d.test.len() } as u64).to_le_bytes());
    for s in splits {
        put_values(&mut out, s.x1.data(), dtype);
        put_values(&mut out, s.x2.data(), dtype);
        if let Some(f) = &s.factors {
            put_values(&mut out, f.data(), DTYPE_F64);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated dataset container while reading {what}"),
            })?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn values(&mut self, n: usize, dtype: u8, what: &str) -> Result<Vec<f64>> {
        Ok(if dtype == DTYPE_U8 {
            self.take(n, what)?
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        } else {
            self.take(n * 8, what)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        })
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<PairedDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CONTAINER_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a dataset container (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!(
                "unsupported container version {version}, expected {CONTAINER_VERSION}"
            ),
        });
    }
    let kind = DatasetKind::from_tag(r.u8("kind")?).ok_or(Error::Format {
        offset: 8,
        detail: "unknown dataset kind".into(),
    })?;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F64 && dtype != DTYPE_U8 {
        return Err(Error::Format {
            offset: 9,
            detail: format!("unknown dtype {dtype}"),
        });
    }
    let shared = r.u8("shared flag")? == 1;
    r.u8("padding")?;
    let seed = r.u64("seed")?;
    let (d1, d2, fd) = (
        r.u32("x1_dim")? as usize,
        r.u32("x2_dim")? as usize,
        r.u32("factor_dim")? as usize,
    );
    let (n_train, n_test) = (r.u64("n_train")? as usize, r.u64("n_test")? as usize);
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: 0,
            detail: "container too short".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format {
            offset: body.len() as u64,
            detail: "dataset container checksum mismatch".into(),
        });
    }
    let mut split = |n: usize| -> Result<Split> {
        let x1 = Tensor::new(vec![n, d1], r.values(n * d1, dtype, "x1")?)?;
        let x2 = Tensor::new(vec![n, d2], r.values(n * d2, dtype, "x2")?)?;
        let f = if fd > 0 {
            Some(Tensor::new(
                vec![n, fd],
                r.values(n * fd, DTYPE_F64, "factors")?,
            )?)
        } else {
            None
        };
        Split::new(x1, x2, f)
    };
    let train = Arc::new(split(n_train)?);
    let test = if shared {
        train.clone()
    } else {
        Arc::new(split(n_test)?)
    };
    if r.pos != body.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: "trailing bytes in dataset container".into(),
        });
    }
    Ok(PairedDataset {
        kind,
        seed,
        train,
        test,
    })
}

pub fn save_dataset(d: &PairedDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format {
        offset: 0,
        detail: format!("cannot read dataset {}: {e}", path.display()),
    })?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_generate, SynthSpec};

    fn tiny_synth() -> PairedDataset {
        synth_generate(&SynthSpec {
            n_train: 30,
            n_test: 7,
            seed: 9,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn f64_round_trip() {
        let d = tiny_synth();
        let back = decode_dataset(&encode_dataset(&d)).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn byte_payload_round_trip_and_shared_test() {
        let x = Tensor::new(
            vec![2, 3],
            vec![0.0, 1.0, 128.0 / 255.0, 1.0, 0.0, 3.0 / 255.0],
        )
        .unwrap();
        let s = Arc::new(Split::new(x.clone(), x, Some(Tensor::zeros(&[2, 1]))).unwrap());
        let d = PairedDataset {
            kind: DatasetKind::Sprites,
            seed: 0,
            train: s.clone(),
            test: s,
        };
        let bytes = encode_dataset(&d);
        assert_eq!(bytes[9], DTYPE_U8);
        let back = decode_dataset(&bytes).unwrap();
        assert!(back.test_is_train());
        assert_eq!(back, d);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_dataset(&tiny_synth());
        let k = bytes.len() / 2;
        bytes[k] ^= 0xFF;
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { .. })));
        let bytes = encode_dataset(&tiny_synth());
        assert!(matches!(
            decode_dataset(&bytes[..40]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}

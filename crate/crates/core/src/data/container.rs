use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"AVT1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"AVC1";
const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

/// What went wrong while decoding a container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseIssue {
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    UnsupportedVersion(u32),
    Truncated { needed: usize, available: usize },
    RankTooLarge(u32),
    ZeroExtent { dim: usize },
    SizeOverflow,
    NameTooLong(u32),
    NameNotUtf8,
    DuplicateName(String),
    NonFinite { index: usize },
    OutOfRange { index: usize },
    TrailingBytes(usize),
}

impl fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseIssue::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            ParseIssue::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            ParseIssue::Truncated { needed, available } => {
                write!(f, "truncated: need {needed} bytes, {available} available")
            }
            ParseIssue::RankTooLarge(r) => write!(f, "rank {r} exceeds {MAX_RANK}"),
            ParseIssue::ZeroExtent { dim } => write!(f, "dimension {dim} has zero extent"),
            ParseIssue::SizeOverflow => f.write_str("element count overflows"),
            ParseIssue::NameTooLong(n) => write!(f, "tensor name of {n} bytes exceeds {MAX_NAME}"),
            ParseIssue::NameNotUtf8 => f.write_str("tensor name is not UTF-8"),
            ParseIssue::DuplicateName(n) => write!(f, "duplicate tensor name `{n}`"),
            ParseIssue::NonFinite { index } => write!(f, "non-finite value at element {index}"),
            ParseIssue::OutOfRange { index } => {
                write!(f, "video value outside [-1, 1] at element {index}")
            }
            ParseIssue::TrailingBytes(n) => write!(f, "{n} trailing bytes"),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, issue: ParseIssue) -> DataError {
        DataError::Parse {
            offset: self.pos,
            issue,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(self.fail(ParseIssue::Truncated {
                needed: n,
                available,
            }));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128, DataError> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), DataError> {
        let start = self.pos;
        let n = 4.min(self.buf.len() - self.pos);
        let found = &self.buf[self.pos..self.pos + n];
        if found != expected {
            return Err(DataError::Parse {
                offset: start,
                issue: ParseIssue::BadMagic {
                    expected: *expected,
                    found: found.to_vec(),
                },
            });
        }
        self.pos += 4;
        Ok(())
    }

    fn version(&mut self) -> Result<(), DataError> {
        let start = self.pos;
        let v = self.u32()?;
        if v != VERSION {
            return Err(DataError::Parse {
                offset: start,
                issue: ParseIssue::UnsupportedVersion(v),
            });
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, DataError> {
        self.magic(TENSOR_MAGIC)?;
        self.version()?;
        let rank_at = self.pos;
        let rank = self.u32()?;
        if rank > MAX_RANK {
            return Err(DataError::Parse {
                offset: rank_at,
                issue: ParseIssue::RankTooLarge(rank),
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for dim in 0..rank as usize {
            let at = self.pos;
            let e = self.u64()?;
            let issue = if e == 0 {
                Some(ParseIssue::ZeroExtent { dim })
            } else {
                match usize::try_from(e).ok().and_then(|e| count.checked_mul(e)) {
                    Some(c) => {
                        count = c;
                        None
                    }
                    None => Some(ParseIssue::SizeOverflow),
                }
            };
            if let Some(issue) = issue {
                return Err(DataError::Parse { offset: at, issue });
            }
            shape.push(e as usize);
        }
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| self.fail(ParseIssue::SizeOverflow))?;
        let payload = self.take(bytes)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    fn finish(&self) -> Result<(), DataError> {
        let rest = self.buf.len() - self.pos;
        if rest > 0 {
            return Err(self.fail(ParseIssue::TrailingBytes(rest)));
        }
        Ok(())
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes one tensor as an `AVT1` record.
pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.len());
    put_tensor(&mut out, t);
    out
}

/// Parses a complete `AVT1` record.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

fn check_video_values(t: &Tensor<f32>, payload_offset: usize) -> Result<(), DataError> {
    for (index, v) in t.data().iter().enumerate() {
        let issue = if !v.is_finite() {
            ParseIssue::NonFinite { index }
        } else if !(-1.0..=1.0).contains(v) {
            ParseIssue::OutOfRange { index }
        } else {
            continue;
        };
        return Err(DataError::Parse {
            offset: payload_offset + 4 * index,
            issue,
        });
    }
    Ok(())
}

/// Writes a video tensor; every value must lie in `[-1, 1]`.
pub fn save_video(path: &Path, video: &Tensor<f32>) -> Result<(), DataError> {
    if let Err(DataError::Parse { issue, .. }) = check_video_values(video, 0) {
        return Err(DataError::Invalid(format!("refusing to save video: {issue}")));
    }
    fs::write(path, encode_tensor(video)).map_err(|e| DataError::io(path, e))
}

/// Reads a video tensor and checks the `[-1, 1]` value range.
pub fn load_video(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let t = decode_tensor(&bytes)?;
    check_video_values(&t, 12 + 8 * t.rank())?;
    Ok(t)
}

/// Generator and sampler positions needed to continue a run exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunState {
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub sampler_epoch: u64,
    pub sampler_cursor: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub step: u64,
    pub state: RunState,
    /// Named tensors in file order.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, DataError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DataError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.fingerprint.to_le_bytes());
    out.extend_from_slice(&c.step.to_le_bytes());
    out.extend_from_slice(&c.state.rng_seed);
    out.extend_from_slice(&c.state.rng_stream.to_le_bytes());
    out.extend_from_slice(&c.state.rng_word_pos.to_le_bytes());
    out.extend_from_slice(&c.state.sampler_epoch.to_le_bytes());
    out.extend_from_slice(&c.state.sampler_cursor.to_le_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let fingerprint = r.u64()?;
    let step = r.u64()?;
    let state = RunState {
        rng_seed: r.array()?,
        rng_stream: r.u64()?,
        rng_word_pos: r.u128()?,
        sampler_epoch: r.u64()?,
        sampler_cursor: r.u64()?,
    };
    let count = r.u32()?;
    let mut seen = HashSet::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()?;
        if len > MAX_NAME {
            return Err(DataError::Parse {
                offset: at,
                issue: ParseIssue::NameTooLong(len),
            });
        }
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len as usize)?)
            .map_err(|_| DataError::Parse {
                offset: name_at,
                issue: ParseIssue::NameNotUtf8,
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(DataError::Parse {
                offset: name_at,
                issue: ParseIssue::DuplicateName(name),
            });
        }
        let t = r.tensor()?;
        tensors.push((name, t));
    }
    r.finish()?;
    Ok(Checkpoint {
        fingerprint,
        step,
        state,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), DataError> {
    fs::write(path, encode_checkpoint(c)).map_err(|e| DataError::io(path, e))
}

/// Loads a checkpoint; a fingerprint other than `expected` is refused unless `force`.
pub fn load_checkpoint(path: &Path, expected: Option<u64>, force: bool) -> Result<Checkpoint, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let c = decode_checkpoint(&bytes)?;
    if let Some(expected) = expected {
        if c.fingerprint != expected && !force {
            return Err(DataError::Fingerprint {
                expected,
                found: c.fingerprint,
            });
        }
    }
    Ok(c)
}

//! Checkpoint file: a text header (version, step, rng position, config JSON,
//! tensor directory) terminated by `end <bytes>`, then the tensors as
//! concatenated little-endian `f64` values.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, ParamStore};

pub const HEADER: &str = "ravar-checkpoint v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Which table a stored tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Param,
    FirstMoment,
    SecondMoment,
}

impl Group {
    fn tag(self) -> &'static str {
        match self {
            Group::Param => "param",
            Group::FirstMoment => "m1",
            Group::SecondMoment => "m2",
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        match tag {
            "param" => Some(Group::Param),
            "m1" => Some(Group::FirstMoment),
            "m2" => Some(Group::SecondMoment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub rng: RngState,
    pub config: TrainConfig,
    pub params: BTreeMap<String, DenseMatrix>,
    /// Optimizer moment estimates; empty before the first update.
    pub first_moment: BTreeMap<String, DenseMatrix>,
    pub second_moment: BTreeMap<String, DenseMatrix>,
}

impl Checkpoint {
    pub fn from_store(step: usize, rng: RngState, config: TrainConfig, store: &ParamStore) -> Self {
        Self {
            step,
            rng,
            config,
            params: store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn param_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new(self.config.seed);
        for (name, v) in &self.params {
            store.insert(name.clone(), v.clone())?;
        }
        Ok(store)
    }

    fn groups(&self) -> [(Group, &BTreeMap<String, DenseMatrix>); 3] {
        [
            (Group::Param, &self.params),
            (Group::FirstMoment, &self.first_moment),
            (Group::SecondMoment, &self.second_moment),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut header = format!(
            "{HEADER}\nstep {}\nrng {} {}\nconfig {config}\n",
            self.step, self.rng.seed, self.rng.word_pos
        );
        let mut payload = Vec::new();
        for (group, table) in self.groups() {
            for (name, m) in table {
                if name.is_empty() || name.chars().any(char::is_whitespace) {
                    return Err(Error::Format(format!("tensor name {name:?} is not storable")));
                }
                header.push_str(&format!(
                    "tensor {} {name} {} {} {}\n",
                    group.tag(),
                    m.rows(),
                    m.cols(),
                    payload.len()
                ));
                for v in m.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        header.push_str(&format!("end {}\n", payload.len()));
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("checkpoint: {msg}"));
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| bad("header is not terminated".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8".into()))
        };
        if next_line()? != HEADER {
            return Err(bad("unrecognized header".into()));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}` line, found {line:?}")))
        };
        let num = |s: &str| s.parse::<u128>().map_err(|e| bad(format!("bad number {s:?}: {e}")));

        let step = num(&field(next_line()?, "step")?)? as usize;
        let rng_line = field(next_line()?, "rng")?;
        let (seed, word_pos) = rng_line
            .split_once(' ')
            .ok_or_else(|| bad("rng line needs seed and position".into()))?;
        let rng = RngState {
            seed: num(seed)? as u64,
            word_pos: num(word_pos)?,
        };
        let config: TrainConfig = serde_json::from_str(&field(next_line()?, "config")?)
            .map_err(|e| bad(format!("config: {e}")))?;

        let mut directory = Vec::new();
        let payload_len = loop {
            let line = next_line()?;
            if let Ok(len) = field(line, "end") {
                break num(&len)? as usize;
            }
            let entry = field(line, "tensor")?;
            let parts: Vec<&str> = entry.split(' ').collect();
            let [tag, name, rows, cols, offset] = parts[..] else {
                return Err(bad(format!("malformed tensor line {line:?}")));
            };
            let group = Group::parse(tag).ok_or_else(|| bad(format!("unknown tensor group {tag}")))?;
            directory.push((
                group,
                name.to_string(),
                num(rows)? as usize,
                num(cols)? as usize,
                num(offset)? as usize,
            ));
        };
        let payload = &bytes[pos..];
        if payload.len() != payload_len {
            return Err(bad(format!("payload has {} bytes, header says {payload_len}", payload.len())));
        }

        let mut ckpt = Checkpoint {
            step,
            rng,
            config,
            params: BTreeMap::new(),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        };
        let mut expected_offset = 0;
        for (group, name, rows, cols, offset) in directory {
            let len = rows * cols * 8;
            if offset != expected_offset || offset + len > payload.len() {
                return Err(bad(format!("tensor {name} has an inconsistent offset")));
            }
            expected_offset += len;
            let data = payload[offset..offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let table = match group {
                Group::Param => &mut ckpt.params,
                Group::FirstMoment => &mut ckpt.first_moment,
                Group::SecondMoment => &mut ckpt.second_moment,
            };
            if table.insert(name.clone(), DenseMatrix::new(rows, cols, data)?).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        if expected_offset != payload.len() {
            return Err(bad("payload has unreferenced bytes".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new(3);
        store.init_projection("a.w", 3, 2).unwrap();
        store.init_zeros("a.b", 1, 2).unwrap();
        let mut c = Checkpoint::from_store(
            17,
            RngState {
                seed: 3,
                word_pos: 1 << 70,
            },
            TrainConfig::default(),
            &store,
        );
        c.first_moment.insert("a.w".into(), DenseMatrix::filled(3, 2, -1e-300));
        c.second_moment.insert("a.w".into(), DenseMatrix::filled(3, 2, 0.1 + 0.2));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.param_store().unwrap().get("a.w").unwrap(), &c.params["a.w"]);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[1..]).is_err());
        let mut extra = bytes;
        extra.push(1);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}

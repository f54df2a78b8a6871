//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic, format version, batch and episode
//! counters, the run config as TOML, then the policy and value networks
//! (output kind, layer sizes, Adam step, parameters, first and second
//! moments). Floats are stored as raw bits so a round trip is exact.

use std::path::Path;

use crate::config::RunConfig;
use crate::nn::{MlpSpec, Network, OutputKind};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DGATECKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of PPO updates applied.
    pub batch: u64,
    pub episodes: u64,
    pub config: RunConfig,
    pub policy: Network,
    pub value: Network,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut out, self.batch);
        put_u64(&mut out, self.episodes);
        let text = self.config.to_toml();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_network(&mut out, &self.policy);
        put_network(&mut out, &self.value);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let batch = r.u64()?;
        let episodes = r.u64()?;
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(text)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let policy = r.network()?;
        let value = r.network()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after value network".into()));
        }
        Ok(Self {
            batch,
            episodes,
            config,
            policy,
            value,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_network(out: &mut Vec<u8>, net: &Network) {
    let spec = net.spec();
    out.push(match spec.output {
        OutputKind::Softmax => 0,
        OutputKind::Identity => 1,
    });
    put_u64(out, spec.sizes.len() as u64);
    for &s in &spec.sizes {
        put_u64(out, s as u64);
    }
    put_u64(out, net.step);
    for v in [&net.params, &net.m, &net.v] {
        for x in v.iter() {
            put_u64(out, x.to_bits());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A length that must fit in the remaining bytes.
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        Ok(v as usize)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_bits(self.u64()?))).collect()
    }

    fn network(&mut self) -> Result<Network> {
        let output = match self.take(1)?[0] {
            0 => OutputKind::Softmax,
            1 => OutputKind::Identity,
            k => return Err(Error::Checkpoint(format!("unknown output kind {k}"))),
        };
        let layers = self.len()?;
        let sizes = (0..layers)
            .map(|_| self.len())
            .collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(sizes, output).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = self.u64()?;
        let n = spec.param_count();
        if n.saturating_mul(24) > self.bytes.len() - self.pos {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let params = self.floats(n)?;
        let m = self.floats(n)?;
        let v = self.floats(n)?;
        let net = Network::from_parts(spec, params, m, v, step)?;
        net.check_finite()
            .map_err(|e| Error::Checkpoint(format!("corrupt parameters: {e}")))?;
        Ok(net)
    }
}

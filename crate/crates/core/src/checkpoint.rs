//! Binary checkpoints of posteriors, GAN pairs and plain MLPs.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "DPVGERCK"
//! version  u32      1
//! kind     u8       1 = posterior, 2 = GAN pair, 3 = MLP
//! header            GAN only: task u64, class u64, stamped u8, epsilon f64, delta f64
//! networks          posterior: μ then ρ; GAN: generator then discriminator; MLP: one
//! ```
//!
//! A network is its output activation code (u8), its layer count (u32) and
//! then `W, b` per layer, each an array: rows u64, cols u64, `rows·cols` f64.

use std::fmt;
use std::path::Path;

use crate::bnn::MeanFieldPosterior;
use crate::error::{Error, Result};
use crate::gan::GanPair;
use crate::nn::{Activation, Layer, Matrix, MlpParams};

pub const MAGIC: &[u8; 8] = b"DPVGERCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Posterior(MeanFieldPosterior),
    Gan(GanPair),
    Mlp(MlpParams),
}

impl Checkpoint {
    fn kind(&self) -> u8 {
        match self {
            Checkpoint::Posterior(_) => 1,
            Checkpoint::Gan(_) => 2,
            Checkpoint::Mlp(_) => 3,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.kind());
        match self {
            Checkpoint::Posterior(p) => {
                w.network(p.mu());
                w.network(p.rho());
            }
            Checkpoint::Gan(g) => {
                w.u64(g.task_id as u64);
                w.u64(g.class_label as u64);
                let (stamped, (eps, delta)) = match g.privacy {
                    Some(s) => (1, s),
                    None => (0, (0.0, 0.0)),
                };
                w.u8(stamped);
                w.f64(eps);
                w.f64(delta);
                w.network(&g.generator);
                w.network(&g.discriminator);
            }
            Checkpoint::Mlp(m) => w.network(m),
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let ck = match r.u8()? {
            1 => {
                let mu = r.network()?;
                let rho = r.network()?;
                Checkpoint::Posterior(MeanFieldPosterior::new(mu, rho)?)
            }
            2 => {
                let task_id = r.u64()? as usize;
                let class_label = r.u64()? as usize;
                let stamped = r.u8()?;
                let eps = r.f64()?;
                let delta = r.f64()?;
                let privacy = match stamped {
                    0 => None,
                    1 => Some((eps, delta)),
                    s => return Err(Error::Checkpoint(format!("bad privacy stamp flag {s}"))),
                };
                let generator = r.network()?;
                let discriminator = r.network()?;
                Checkpoint::Gan(GanPair {
                    generator,
                    discriminator,
                    class_label,
                    task_id,
                    privacy,
                })
            }
            3 => Checkpoint::Mlp(r.network()?),
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}

fn widths(m: &MlpParams) -> String {
    m.widths().iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// Human-readable header, as printed by `dpvger inspect`.
impl fmt::Display for Checkpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "format = DPVGERCK v{VERSION}")?;
        match self {
            Checkpoint::Posterior(p) => {
                writeln!(f, "kind = posterior")?;
                writeln!(f, "widths = {}", widths(p.mu()))?;
                write!(f, "weights = {}", p.num_weights())
            }
            Checkpoint::Gan(g) => {
                writeln!(f, "kind = gan")?;
                writeln!(f, "task = {}", g.task_id)?;
                writeln!(f, "class = {}", g.class_label)?;
                match g.privacy {
                    Some((e, d)) => writeln!(f, "privacy = ({e}, {d:e})")?,
                    None => writeln!(f, "privacy = none")?,
                }
                writeln!(f, "generator = {}", widths(&g.generator))?;
                write!(f, "discriminator = {}", widths(&g.discriminator))
            }
            Checkpoint::Mlp(m) => {
                writeln!(f, "kind = mlp")?;
                writeln!(f, "widths = {}", widths(m))?;
                write!(f, "params = {}", m.num_params())
            }
        }
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn array(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    fn network(&mut self, p: &MlpParams) {
        self.u8(p.output_activation().code());
        self.u32(p.layers().len() as u32);
        for l in p.layers() {
            self.array(&l.w);
            self.array(&l.b);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn array(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("array {rows}x{cols} exceeds file size")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn network(&mut self) -> Result<MlpParams> {
        let code = self.u8()?;
        let act = Activation::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown activation code {code}")))?;
        let n = self.u32()? as usize;
        let layers = (0..n)
            .map(|_| {
                Ok(Layer {
                    w: self.array()?,
                    b: self.array()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers, act).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

//! Binary network checkpoints.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic            4 bytes  "IQNF"
//! version          u32      = 1
//! agent            u32
//! episode          u64      episodes completed when written
//! epsilon          f64      exploration rate when written
//! input_dim        u32      = 4
//! hidden_count     u32
//! hidden widths    u32 x hidden_count
//! head_count       u32      = 3 (V, mu, l)
//! u_max            f64
//! dropout, leaky_slope, curvature_floor, huber_delta,
//! init_clip, head_init                      f64 x 6
//! param_count      u64
//! online params    f64 x param_count
//! target params    f64 x param_count
//! adam beta1, beta2, epsilon                f64 x 3
//! adam step        u64
//! adam m, v        f64 x param_count each
//! ```
//!
//! Parameters are stored layer by layer, each layer as row-major weights
//! (`fan_out x fan_in`) followed by `fan_out` biases. The head layer's rows are
//! ordered V, mu, l.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Adam, NafNetwork, NetConfig, HEADS, STATE_DIM};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IQNF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bookkeeping stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckpointMeta {
    pub agent: u32,
    pub episode: u64,
    pub epsilon: f64,
}

impl NafNetwork {
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w, meta)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_checkpoint(&mut BufReader::new(file), path)
    }

    /// Loads and checks the hidden widths against `expected`.
    pub fn load_expecting(path: &Path, expected: &[usize]) -> Result<(Self, CheckpointMeta)> {
        let (net, meta) = Self::load(path)?;
        if net.hidden() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{}: hidden layers {:?}, expected {:?}",
                path.display(),
                net.hidden(),
                expected
            )));
        }
        Ok((net, meta))
    }

    fn write_checkpoint<W: Write>(&self, w: &mut W, meta: &CheckpointMeta) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(meta.agent)?;
        w.write_u64::<LittleEndian>(meta.episode)?;
        w.write_f64::<LittleEndian>(meta.epsilon)?;
        w.write_u32::<LittleEndian>(STATE_DIM as u32)?;
        w.write_u32::<LittleEndian>(self.hidden.len() as u32)?;
        for &h in &self.hidden {
            w.write_u32::<LittleEndian>(h as u32)?;
        }
        w.write_u32::<LittleEndian>(HEADS as u32)?;
        w.write_f64::<LittleEndian>(self.u_max)?;
        let c = &self.config;
        for v in [c.dropout, c.leaky_slope, c.curvature_floor, c.huber_delta, c.init_clip, c.head_init] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u64::<LittleEndian>(self.params.len() as u64)?;
        for v in self.params.iter().chain(&self.target) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in [self.adam.beta1, self.adam.beta2, self.adam.epsilon] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u64::<LittleEndian>(self.adam.step)?;
        for v in self.adam.m.iter().chain(&self.adam.v) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    fn read_checkpoint<R: Read>(r: &mut R, path: &Path) -> Result<(Self, CheckpointMeta)> {
        let malformed = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let io = |e: std::io::Error| malformed(e.to_string());

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(malformed("not a network checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(malformed(format!("unsupported checkpoint version {version}")));
        }
        let meta = CheckpointMeta {
            agent: r.read_u32::<LittleEndian>().map_err(io)?,
            episode: r.read_u64::<LittleEndian>().map_err(io)?,
            epsilon: r.read_f64::<LittleEndian>().map_err(io)?,
        };
        let input = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if input != STATE_DIM {
            return Err(Error::ShapeMismatch(format!("{}: input width {input}, expected {STATE_DIM}", path.display())));
        }
        let hidden_count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if hidden_count == 0 || hidden_count > 64 {
            return Err(malformed(format!("implausible hidden layer count {hidden_count}")));
        }
        let hidden = (0..hidden_count)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize).map_err(io))
            .collect::<Result<Vec<_>>>()?;
        let heads = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if heads != HEADS {
            return Err(Error::ShapeMismatch(format!("{}: {heads} heads, expected {HEADS}", path.display())));
        }
        let u_max = r.read_f64::<LittleEndian>().map_err(io)?;
        let mut f = || r.read_f64::<LittleEndian>().map_err(io);
        let config = NetConfig {
            hidden_layers: hidden_count,
            hidden_units: hidden[0],
            dropout: f()?,
            leaky_slope: f()?,
            curvature_floor: f()?,
            huber_delta: f()?,
            init_clip: f()?,
            head_init: f()?,
            ..NetConfig::default()
        };
        let count = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let (_, expected) = super::layout(&hidden);
        if count != expected {
            return Err(Error::ShapeMismatch(format!(
                "{}: {count} parameters stored, hidden layers {hidden:?} need {expected}",
                path.display()
            )));
        }
        let read_vec = |n: usize, r: &mut R| -> Result<Vec<f64>> {
            (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(io)).collect()
        };
        let params = read_vec(count, r)?;
        let target = read_vec(count, r)?;
        let adam_consts = read_vec(3, r)?;
        let step = r.read_u64::<LittleEndian>().map_err(io)?;
        let m = read_vec(count, r)?;
        let v = read_vec(count, r)?;
        let config = NetConfig {
            adam_beta1: adam_consts[0],
            adam_beta2: adam_consts[1],
            adam_epsilon: adam_consts[2],
            ..config
        };
        let adam = Adam {
            beta1: adam_consts[0],
            beta2: adam_consts[1],
            epsilon: adam_consts[2],
            m,
            v,
            step,
        };
        let net = NafNetwork::from_parts(config, hidden, u_max, params, target, adam)?;
        Ok((net, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::UpdateSample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = NafNetwork::new(&NetConfig::default(), 10.0, &mut rng);
        let batch = [UpdateSample { x: [0.1, 0.0, 0.02, 0.0], u: 1.0, y: 3.0, lr: 1e-3 }];
        net.update(&batch, &mut rng).unwrap();
        let meta = CheckpointMeta { agent: 1, episode: 17, epsilon: 0.42 };
        net.save(&path, &meta).unwrap();
        let (back, back_meta) = NafNetwork::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back_meta, meta);
    }

    #[test]
    fn shape_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let net = NafNetwork::with_hidden(&NetConfig::default(), &[8, 8], 10.0, &mut ChaCha8Rng::seed_from_u64(1));
        net.save(&path, &CheckpointMeta::default()).unwrap();
        assert!(matches!(NafNetwork::load_expecting(&path, &[64, 64, 64]), Err(Error::ShapeMismatch(_))));
        assert!(NafNetwork::load_expecting(&path, &[8, 8]).is_ok());
    }

    #[test]
    fn truncated_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let net = NafNetwork::with_hidden(&NetConfig::default(), &[4], 10.0, &mut ChaCha8Rng::seed_from_u64(1));
        net.save(&path, &CheckpointMeta::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(NafNetwork::load(&path), Err(Error::Format { .. })));
        assert!(matches!(NafNetwork::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}

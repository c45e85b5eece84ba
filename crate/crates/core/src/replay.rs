//! Experience memory with temporal experience replay.
//!
//! Sampling runs in two stages. A macro-batch is drawn uniformly without
//! replacement; its size shrinks toward the mini-batch size while exploration
//! is high. The mini-batch is then drawn from the macro-batch without
//! replacement, each draw weighted by `exp(-age) + xi`, where age counts
//! global environment steps since collection.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::StateVec;
use crate::error::{Error, Result};

/// Lower bound applied under the configured priority offset so that an old
/// macro-batch never normalizes to 0/0.
pub const XI_FLOOR: f64 = 1e-8;

const SNAPSHOT_MAGIC: &[u8; 4] = b"IQRM";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub x: StateVec,
    /// Controls of all agents, observed retrospectively.
    pub u_joint: Vec<f64>,
    /// Reward of the owning agent.
    pub r: f64,
    pub x_next: StateVec,
    /// Global step at collection.
    pub k_c: u64,
    /// Owner's exploration rate at collection.
    pub eps_c: f64,
    /// The transition left the admissible region (no bootstrap).
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerParams {
    pub capacity: usize,
    /// Final macro-batch size `B`.
    pub macro_batch: usize,
    /// Mini-batch size `t`.
    pub mini_batch: usize,
    pub xi_temp: f64,
}

impl Default for TerParams {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            macro_batch: 256,
            mini_batch: 80,
            xi_temp: 0.0,
        }
    }
}

impl TerParams {
    pub fn validate(&self) -> Result<()> {
        if self.mini_batch == 0 {
            return Err(Error::config("replay.mini_batch", "must be > 0"));
        }
        if self.mini_batch >= self.macro_batch {
            return Err(Error::config(
                "replay.mini_batch",
                format!("must be < macro_batch ({})", self.macro_batch),
            ));
        }
        if self.macro_batch > self.capacity {
            return Err(Error::config(
                "replay.macro_batch",
                format!("must be <= capacity ({})", self.capacity),
            ));
        }
        if !(self.xi_temp.is_finite() && self.xi_temp >= 0.0) {
            return Err(Error::config("replay.xi_temp", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `round((B - t)(1 - eps) + t)`, clamped to `[t, B]`.
pub fn macro_batch_size(macro_batch: usize, mini_batch: usize, eps: f64) -> usize {
    let b = macro_batch as f64;
    let t = mini_batch as f64;
    let size = ((b - t) * (1.0 - eps) + t).round();
    (size as usize).clamp(mini_batch, macro_batch)
}

pub fn temporal_priority(k_now: u64, k_c: u64, xi: f64) -> f64 {
    let age = k_now.saturating_sub(k_c) as f64;
    (-age).exp() + xi.max(XI_FLOOR)
}

/// Normalized sampling probabilities for experiences collected at `k_cs`.
pub fn sampling_probabilities(k_now: u64, k_cs: &[u64], xi: f64) -> Vec<f64> {
    let tau: Vec<f64> = k_cs.iter().map(|&k_c| temporal_priority(k_now, k_c, xi)).collect();
    let total: f64 = tau.iter().sum();
    tau.into_iter().map(|p| p / total).collect()
}

/// Draws `count` distinct positions in `weights`, each draw proportional to
/// the weights still in play. Returned in draw order. Falls back to uniform
/// among the remaining positions if their weights sum to zero.
pub fn weighted_draws<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let count = count.min(weights.len());
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let slot = if total > 0.0 && total.is_finite() {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = remaining.len() - 1;
            for (slot, &i) in remaining.iter().enumerate() {
                target -= weights[i];
                if target < 0.0 {
                    chosen = slot;
                    break;
                }
            }
            // rounding can leave `target` marginally positive; never land on a zero weight
            while weights[remaining[chosen]] <= 0.0 && chosen > 0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.gen_range(0..remaining.len())
        };
        picked.push(remaining.swap_remove(slot));
    }
    picked
}

/// Bounded FIFO memory owned by one agent.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    store: VecDeque<Experience>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            store: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Experience> {
        self.store.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.store.iter()
    }

    pub fn push(&mut self, experience: Experience) {
        if self.store.len() == self.capacity {
            self.store.pop_front();
        }
        self.store.push_back(experience);
    }

    /// Two-stage temporal sample of `params.mini_batch` distinct experiences.
    pub fn sample_ter<R: Rng + ?Sized>(
        &self,
        params: &TerParams,
        eps: f64,
        k_now: u64,
        rng: &mut R,
    ) -> Result<Vec<&Experience>> {
        Ok(self
            .sample_ter_indices(params, eps, k_now, rng)?
            .into_iter()
            .map(|i| &self.store[i])
            .collect())
    }

    pub fn sample_ter_indices<R: Rng + ?Sized>(
        &self,
        params: &TerParams,
        eps: f64,
        k_now: u64,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let t = params.mini_batch;
        if self.store.len() < t {
            return Err(Error::InsufficientExperiences {
                have: self.store.len(),
                need: t,
            });
        }
        let b_k = macro_batch_size(params.macro_batch, t, eps).min(self.store.len());
        let macro_idx = index::sample(rng, self.store.len(), b_k).into_vec();
        let weights: Vec<f64> = macro_idx
            .iter()
            .map(|&i| temporal_priority(k_now, self.store[i].k_c, params.xi_temp))
            .collect();
        Ok(weighted_draws(&weights, t, rng)
            .into_iter()
            .map(|slot| macro_idx[slot])
            .collect())
    }

    /// Writes the memory as a versioned little-endian snapshot.
    ///
    /// Layout: magic `IQRM`, `u32` version, `u32` agents per record, `u64`
    /// capacity, `u64` record count, then per record: `x` (4 × f64),
    /// `u_joint` (agents × f64), `r` f64, `x_next` (4 × f64), `k_c` u64,
    /// `eps_c` f64, `terminal` u8.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(&mut BufReader::new(file), path)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let agents = self.store.front().map_or(0, |e| e.u_joint.len());
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u32::<LittleEndian>(agents as u32)?;
        w.write_u64::<LittleEndian>(self.capacity as u64)?;
        w.write_u64::<LittleEndian>(self.store.len() as u64)?;
        for e in &self.store {
            if e.u_joint.len() != agents {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "experiences disagree on the number of agents",
                ));
            }
            for v in e.x.iter().chain(&e.u_joint).chain(std::iter::once(&e.r)).chain(&e.x_next) {
                w.write_f64::<LittleEndian>(*v)?;
            }
            w.write_u64::<LittleEndian>(e.k_c)?;
            w.write_f64::<LittleEndian>(e.eps_c)?;
            w.write_u8(e.terminal as u8)?;
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let malformed = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let io = |e: std::io::Error| malformed(e.to_string());

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(malformed("not a replay snapshot".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != SNAPSHOT_VERSION {
            return Err(malformed(format!("unsupported snapshot version {version}")));
        }
        let agents = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let capacity = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        if capacity == 0 || count > capacity {
            return Err(malformed(format!("count {count} exceeds capacity {capacity}")));
        }
        let mut memory = Self::new(capacity);
        let read_vec = |n: usize, r: &mut R| -> Result<Vec<f64>> {
            (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(io)).collect()
        };
        for _ in 0..count {
            let x = read_vec(4, r)?;
            let u_joint = read_vec(agents, r)?;
            let reward = read_vec(1, r)?[0];
            let x_next = read_vec(4, r)?;
            let k_c = r.read_u64::<LittleEndian>().map_err(io)?;
            let eps_c = r.read_f64::<LittleEndian>().map_err(io)?;
            let terminal = r.read_u8().map_err(io)? != 0;
            memory.push(Experience {
                x: [x[0], x[1], x[2], x[3]],
                u_joint,
                r: reward,
                x_next: [x_next[0], x_next[1], x_next[2], x_next[3]],
                k_c,
                eps_c,
                terminal,
            });
        }
        Ok(memory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn exp(k_c: u64) -> Experience {
        Experience {
            x: [k_c as f64, 0.0, 0.0, 0.0],
            u_joint: vec![1.0, -1.0],
            r: 1.0,
            x_next: [0.0; 4],
            k_c,
            eps_c: 0.5,
            terminal: false,
        }
    }

    fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
        let n: u64 = counts.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn push_and_evict() {
        let mut m = ReplayMemory::new(3);
        m.push(exp(0));
        assert_eq!(m.len(), 1);
        for k in 1..4 {
            m.push(exp(k));
        }
        assert_eq!(m.len(), 3);
        let ks: Vec<u64> = m.iter().map(|e| e.k_c).collect();
        assert_eq!(ks, vec![1, 2, 3]);
    }

    #[test]
    fn macro_batch_schedule() {
        assert_eq!(macro_batch_size(256, 80, 1.0), 80);
        assert_eq!(macro_batch_size(256, 80, 0.0), 256);
        assert_eq!(macro_batch_size(256, 80, 0.5), 168);
        assert_eq!(macro_batch_size(256, 80, 0.25), 212);
        assert_eq!(macro_batch_size(256, 80, 0.75), 124);
    }

    #[test]
    fn priority_values() {
        assert_eq!(temporal_priority(5, 5, 0.0), 1.0 + XI_FLOOR);
        let one = temporal_priority(6, 5, 0.0);
        assert!((one - (0.36787944117144233 + XI_FLOOR)).abs() < 1e-15);
        let old = temporal_priority(105, 5, 0.0);
        // exp(-100) is below the resolution of 1e-8
        assert_eq!(old, XI_FLOOR);
        assert_eq!(temporal_priority(5, 5, 0.5), 1.5);
    }

    #[test]
    fn insufficient_experiences() {
        let mut m = ReplayMemory::new(10);
        m.push(exp(0));
        let p = TerParams {
            capacity: 10,
            macro_batch: 5,
            mini_batch: 2,
            xi_temp: 0.0,
        };
        let err = m.sample_ter(&p, 0.5, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientExperiences { have: 1, need: 2 }));
    }

    #[test]
    fn exact_size_memory_returns_everything() {
        let mut m = ReplayMemory::new(10);
        for k in 0..4 {
            m.push(exp(k));
        }
        let p = TerParams {
            capacity: 10,
            macro_batch: 8,
            mini_batch: 4,
            xi_temp: 0.0,
        };
        let mut got: Vec<u64> = m
            .sample_ter(&p, 0.2, 4, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .iter()
            .map(|e| e.k_c)
            .collect();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fresh_experience_dominates() {
        let mut m = ReplayMemory::new(64);
        for k in 0..31 {
            m.push(exp(k));
        }
        let k_now = 10_031;
        m.push(exp(k_now));
        let p = TerParams {
            capacity: 64,
            macro_batch: 32,
            mini_batch: 1,
            xi_temp: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hits = (0..2000)
            .filter(|_| m.sample_ter(&p, 0.0, k_now, &mut rng).unwrap()[0].k_c == k_now)
            .count();
        // P(fresh) = 1 / (1 + 31e-8) per the normalized priorities
        assert_eq!(hits, 2000);
    }

    #[test]
    fn stage_two_matches_priorities() {
        let ks: Vec<u64> = vec![100, 99, 99, 98, 97, 96, 95, 93, 90, 80];
        let probs = sampling_probabilities(100, &ks, 0.05);
        let weights: Vec<f64> = ks.iter().map(|&k| temporal_priority(100, k, 0.05)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut counts = vec![0u64; ks.len()];
        for _ in 0..100_000 {
            counts[weighted_draws(&weights, 1, &mut rng)[0]] += 1;
        }
        assert!(chi_square_p(&counts, &probs) > 0.01);
    }

    #[test]
    fn equal_priorities_are_uniform() {
        let weights = vec![XI_FLOOR; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0u64; 10];
        for _ in 0..50_000 {
            counts[weighted_draws(&weights, 1, &mut rng)[0]] += 1;
        }
        assert!(chi_square_p(&counts, &[0.1; 10]) > 0.01);
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let picks = weighted_draws(&[0.0; 6], 6, &mut rng);
        let mut sorted = picks.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.bin");
        let mut m = ReplayMemory::new(5);
        for k in 0..7 {
            let mut e = exp(k);
            e.terminal = k % 2 == 0;
            m.push(e);
        }
        m.save(&path).unwrap();
        let back = ReplayMemory::load(&path).unwrap();
        assert_eq!(back.capacity(), 5);
        assert_eq!(back.iter().collect::<Vec<_>>(), m.iter().collect::<Vec<_>>());

        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(ReplayMemory::load(&path), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn probabilities_normalize(ks in proptest::collection::vec(0u64..5000, 1..256), xi in 0.0f64..1.0) {
            let k_now = 5000;
            let total: f64 = sampling_probabilities(k_now, &ks, xi).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn priority_decreases_with_age(age in 0u64..30, xi in 0.0f64..1.0) {
            prop_assert!(temporal_priority(100, 100 - age, xi) > temporal_priority(100, 99 - age, xi));
        }

        #[test]
        fn mini_batch_has_no_duplicates(n in 20usize..200, eps in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut m = ReplayMemory::new(500);
            for k in 0..n as u64 {
                m.push(exp(k));
            }
            let p = TerParams { capacity: 500, macro_batch: 64, mini_batch: 16, xi_temp: 0.0 };
            let mut idx = m.sample_ter_indices(&p, eps, n as u64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(idx.len(), 16);
            idx.sort();
            idx.dedup();
            prop_assert_eq!(idx.len(), 16);
        }
    }
}

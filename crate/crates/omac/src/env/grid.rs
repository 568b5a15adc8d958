//! Cooperative spread-style gridworld: agents earn a shared reward for
//! covering distinct landmarks at episode end, minus a 0.05 step penalty.
//! Each agent observes its own position, the time index, and the cell
//! contents within its view radius.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

use super::{EnvConfig, JointAction, JointObs, StateId};
use crate::error::{OmacError, Result};

/// stay, up, down, left, right
pub const N_MOVES: usize = 5;
pub const STEP_PENALTY: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct GridEnv {
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    pub n_landmarks: usize,
    pub horizon: usize,
    pub radius: usize,
    pub gamma: f64,
    pub landmarks: Vec<usize>,
}

impl GridEnv {
    pub fn new(
        width: usize,
        height: usize,
        n_agents: usize,
        n_landmarks: usize,
        horizon: usize,
        radius: usize,
        gamma: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 || n_agents == 0 || horizon == 0 {
            return Err(OmacError::Config(
                "grid dimensions, agent count and horizon must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(OmacError::Config(format!("gamma must be in [0,1), got {gamma}")));
        }
        let cells = width * height;
        if cells < n_agents + n_landmarks {
            return Err(OmacError::Config(format!(
                "infeasible geometry: {cells} cells for {n_agents} agents + {n_landmarks} landmarks"
            )));
        }
        let landmarks = spread_landmarks(cells, n_landmarks)?;
        Ok(GridEnv {
            width,
            height,
            n_agents,
            n_landmarks,
            horizon,
            radius,
            gamma,
            landmarks,
        })
    }

    pub fn config(&self) -> EnvConfig {
        EnvConfig::Grid {
            width: self.width,
            height: self.height,
            n_agents: self.n_agents,
            n_landmarks: self.n_landmarks,
            horizon: self.horizon,
            radius: self.radius,
            gamma: self.gamma,
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn obs_dim(&self) -> usize {
        let side = 2 * self.radius + 1;
        3 + 2 * side * side
    }

    // State encoding: t * cells^n + sum_i pos_i * cells^i (agent 0 least
    // significant digit).
    pub fn encode(&self, positions: &[usize], t: usize) -> StateId {
        let cells = self.cells() as u64;
        let mut packed = 0u64;
        for &p in positions.iter().rev() {
            packed = packed * cells + p as u64;
        }
        StateId((t as u64) * cells.pow(self.n_agents as u32) + packed)
    }

    pub fn decode(&self, s: StateId) -> (Vec<usize>, usize) {
        let cells = self.cells() as u64;
        let base = cells.pow(self.n_agents as u32);
        let t = (s.0 / base) as usize;
        let mut rest = s.0 % base;
        let mut positions = vec![0; self.n_agents];
        for p in positions.iter_mut() {
            *p = (rest % cells) as usize;
            rest /= cells;
        }
        (positions, t)
    }

    fn xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn reset(&self, seed: u64) -> (StateId, JointObs) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // distinct initial cells, sampled without replacement
        let mut pool: Vec<usize> = (0..self.cells()).collect();
        let mut positions = Vec::with_capacity(self.n_agents);
        for _ in 0..self.n_agents {
            let k = rng.gen_range(0..pool.len());
            positions.push(pool.swap_remove(k));
        }
        let s = self.encode(&positions, 0);
        (s, self.observe(s))
    }

    /// All initial states (distinct ordered placements at t=0) with uniform
    /// probability; feeds the tabular model.
    pub fn initial_states(&self) -> Vec<StateId> {
        let mut out = Vec::new();
        let mut positions = vec![0; self.n_agents];
        self.placements(&mut positions, 0, &mut out);
        out
    }

    fn placements(&self, positions: &mut Vec<usize>, agent: usize, out: &mut Vec<StateId>) {
        if agent == self.n_agents {
            out.push(self.encode(positions, 0));
            return;
        }
        for c in 0..self.cells() {
            if positions[..agent].contains(&c) {
                continue;
            }
            positions[agent] = c;
            self.placements(positions, agent + 1, out);
        }
    }

    pub fn observe(&self, s: StateId) -> JointObs {
        if s == StateId::TERMINAL {
            return vec![vec![0.0; self.obs_dim()]; self.n_agents];
        }
        let (positions, t) = self.decode(s);
        let side = 2 * self.radius + 1;
        let xden = (self.width - 1).max(1) as f64;
        let yden = (self.height - 1).max(1) as f64;
        positions
            .iter()
            .enumerate()
            .map(|(i, &cell)| {
                let (x, y) = self.xy(cell);
                let mut o = Vec::with_capacity(self.obs_dim());
                o.push(x as f64 / xden);
                o.push(y as f64 / yden);
                o.push(t as f64 / self.horizon as f64);
                let r = self.radius as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let cx = x as isize + dx;
                        let cy = y as isize + dy;
                        if cx < 0 || cy < 0 || cx >= self.width as isize || cy >= self.height as isize
                        {
                            o.push(0.0);
                            o.push(0.0);
                            continue;
                        }
                        let c = cy as usize * self.width + cx as usize;
                        o.push(if self.landmarks.contains(&c) { 1.0 } else { 0.0 });
                        let other = positions
                            .iter()
                            .enumerate()
                            .any(|(j, &p)| j != i && p == c);
                        o.push(if other { 1.0 } else { 0.0 });
                    }
                }
                debug_assert_eq!(o.len(), 3 + 2 * side * side);
                o
            })
            .collect()
    }

    pub fn masks(&self, s: StateId) -> Vec<Vec<bool>> {
        if s == StateId::TERMINAL {
            return vec![vec![true; N_MOVES]; self.n_agents];
        }
        let (positions, _) = self.decode(s);
        positions
            .iter()
            .map(|&cell| {
                let (x, y) = self.xy(cell);
                vec![
                    true,                          // stay
                    y > 0,                         // up
                    y + 1 < self.height,           // down
                    x > 0,                         // left
                    x + 1 < self.width,            // right
                ]
            })
            .collect()
    }

    fn apply_move(&self, cell: usize, action: usize) -> usize {
        let (x, y) = self.xy(cell);
        let (nx, ny) = match action {
            0 => (x, y),
            1 => (x, y - 1),
            2 => (x, y + 1),
            3 => (x - 1, y),
            4 => (x + 1, y),
            _ => unreachable!(),
        };
        ny * self.width + nx
    }

    pub fn coverage(&self, positions: &[usize]) -> usize {
        self.landmarks
            .iter()
            .filter(|lm| positions.contains(lm))
            .count()
    }

    pub fn step(
        &self,
        s: StateId,
        action: &JointAction,
        _rng: &mut ChaCha20Rng,
    ) -> Result<(StateId, JointObs, f64, bool)> {
        let (positions, t) = self.decode(s);
        let new_positions: Vec<usize> = positions
            .iter()
            .zip(action.0.iter())
            .map(|(&c, &a)| self.apply_move(c, a))
            .collect();
        let nt = t + 1;
        let done = nt >= self.horizon;
        let mut reward = -STEP_PENALTY;
        if done {
            reward += self.coverage(&new_positions) as f64;
        }
        let ns = if done {
            StateId::TERMINAL
        } else {
            self.encode(&new_positions, nt)
        };
        Ok((ns, self.observe(ns), reward, done))
    }

    pub fn state_from_joint_obs(&self, obs: &JointObs) -> Option<StateId> {
        if obs.len() != self.n_agents {
            return None;
        }
        let xden = (self.width - 1).max(1) as f64;
        let yden = (self.height - 1).max(1) as f64;
        let mut positions = Vec::with_capacity(self.n_agents);
        let mut t = None;
        for o in obs {
            if o.len() != self.obs_dim() {
                return None;
            }
            let x = (o[0] * xden).round() as usize;
            let y = (o[1] * yden).round() as usize;
            if x >= self.width || y >= self.height {
                return None;
            }
            positions.push(y * self.width + x);
            let ti = (o[2] * self.horizon as f64).round() as usize;
            if *t.get_or_insert(ti) != ti {
                return None;
            }
        }
        Some(self.encode(&positions, t?))
    }
}

fn spread_landmarks(cells: usize, n_landmarks: usize) -> Result<Vec<usize>> {
    let lms: Vec<usize> = if n_landmarks == 0 {
        vec![]
    } else if n_landmarks == 1 {
        vec![cells / 2]
    } else {
        (0..n_landmarks)
            .map(|k| k * (cells - 1) / (n_landmarks - 1))
            .collect()
    };
    let mut sorted = lms.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != lms.len() {
        return Err(OmacError::Config(format!(
            "cannot place {n_landmarks} distinct landmarks on {cells} cells"
        )));
    }
    Ok(lms)
}

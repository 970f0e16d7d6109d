//! Exact entropies on small discrete systems, used to check that the
//! reconstruction losses upper-bound the conditional entropies.
//!
//! All quantities are in nats, with `0 ln 0 = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const MAX_ALPHABET: usize = 64;
pub const MASS_TOL: f64 = 1e-12;

/// Compensated (Neumaier) sum.
fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

fn xlnx_ratio(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    XGivenZ,
    ZGivenX,
}

/// Joint distribution over `|X| × |Z|`, row-major with one row per `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    nx: usize,
    nz: usize,
    table: Vec<f64>,
}

fn check_alphabet(nx: usize, nz: usize) -> Result<()> {
    if !(1..=MAX_ALPHABET).contains(&nx) || !(1..=MAX_ALPHABET).contains(&nz) {
        return Err(Error::Domain(format!(
            "alphabet sizes {nx}x{nz} outside 1..={MAX_ALPHABET}"
        )));
    }
    Ok(())
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("{what} has entry {v}")));
    }
    let total = sum(p.iter().copied());
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::Domain(format!("{what} sums to {total}")));
    }
    Ok(())
}

impl DiscreteJoint {
    pub fn new(nx: usize, nz: usize, table: Vec<f64>) -> Result<Self> {
        check_alphabet(nx, nz)?;
        if table.len() != nx * nz {
            return Err(Error::shape(format!("joint table of {} entries for {nx}x{nz}", table.len())));
        }
        check_distribution(&table, "joint")?;
        Ok(DiscreteJoint { nx, nz, table })
    }

    /// Product of two marginals.
    pub fn independent(px: &[f64], pz: &[f64]) -> Result<Self> {
        check_distribution(px, "p(x)")?;
        check_distribution(pz, "p(z)")?;
        let table = px.iter().flat_map(|a| pz.iter().map(move |b| a * b)).collect();
        Self::new(px.len(), pz.len(), table)
    }

    /// Random joint; each entry is zero with probability `sparsity`, with
    /// at least one nonzero entry.
    pub fn random(nx: usize, nz: usize, sparsity: f64, rng: &mut Stream) -> Result<Self> {
        check_alphabet(nx, nz)?;
        let mut w: Vec<f64> = (0..nx * nz)
            .map(|_| if rng.gen::<f64>() < sparsity { 0.0 } else { rng.gen::<f64>() + 1e-3 })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            let i = rng.gen_range(0..w.len());
            w[i] = 1.0;
        }
        let total: f64 = sum(w.iter().copied());
        w.iter_mut().for_each(|v| *v /= total);
        let total: f64 = sum(w.iter().copied());
        w[0] += 1.0 - total;
        if w[0] < 0.0 {
            w[0] = 0.0;
        }
        Self::new(nx, nz, w)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn p(&self, x: usize, z: usize) -> f64 {
        self.table[x * self.nz + z]
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.nx).map(|x| sum((0..self.nz).map(|z| self.p(x, z)))).collect()
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.nz).map(|z| sum((0..self.nx).map(|x| self.p(x, z)))).collect()
    }

    pub fn joint_entropy(&self) -> f64 {
        entropy_unchecked(&self.table)
    }
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -sum(p.iter().map(|&v| if v == 0.0 { 0.0 } else { v * v.ln() }))
}

/// Shannon entropy of a distribution.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "distribution")?;
    Ok(entropy_unchecked(p))
}

/// `H(X|Z)` or `H(Z|X)` by direct enumeration of `-Σ p(x,z) ln p(·|·)`.
pub fn conditional_entropy(joint: &DiscreteJoint, direction: Direction) -> f64 {
    let px = joint.marginal_x();
    let pz = joint.marginal_z();
    let mut terms = Vec::with_capacity(joint.table.len());
    for x in 0..joint.nx {
        for z in 0..joint.nz {
            let pxz = joint.p(x, z);
            if pxz > 0.0 {
                let given = match direction {
                    Direction::XGivenZ => pz[z],
                    Direction::ZGivenX => px[x],
                };
                terms.push(-pxz * (pxz / given).ln());
            }
        }
    }
    sum(terms)
}

/// A model conditional `p(x|z)` or `p(z|x)`, stored `|X| × |Z|` like the
/// joint. Each conditioning slice sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalTable {
    pub direction: Direction,
    nx: usize,
    nz: usize,
    table: Vec<f64>,
}

impl ConditionalTable {
    pub fn new(direction: Direction, nx: usize, nz: usize, table: Vec<f64>) -> Result<Self> {
        check_alphabet(nx, nz)?;
        if table.len() != nx * nz {
            return Err(Error::shape(format!("conditional table of {} entries for {nx}x{nz}", table.len())));
        }
        let c = ConditionalTable {
            direction,
            nx,
            nz,
            table,
        };
        for i in 0..c.slices() {
            check_distribution(&c.slice(i), "conditional slice")?;
        }
        Ok(c)
    }

    fn slices(&self) -> usize {
        match self.direction {
            Direction::XGivenZ => self.nz,
            Direction::ZGivenX => self.nx,
        }
    }

    /// Distribution conditioned on value `i` of the given variable.
    pub fn slice(&self, i: usize) -> Vec<f64> {
        match self.direction {
            Direction::XGivenZ => (0..self.nx).map(|x| self.table[x * self.nz + i]).collect(),
            Direction::ZGivenX => self.table[i * self.nz..(i + 1) * self.nz].to_vec(),
        }
    }

    pub fn p(&self, x: usize, z: usize) -> f64 {
        self.table[x * self.nz + z]
    }

    /// The joint's own conditional. Slices of zero-mass conditioning values
    /// are uniform.
    pub fn from_joint(joint: &DiscreteJoint, direction: Direction) -> Self {
        let (nx, nz) = (joint.nx, joint.nz);
        let px = joint.marginal_x();
        let pz = joint.marginal_z();
        let mut table = vec![0.0; nx * nz];
        for x in 0..nx {
            for z in 0..nz {
                table[x * nz + z] = match direction {
                    Direction::XGivenZ if pz[z] > 0.0 => joint.p(x, z) / pz[z],
                    Direction::XGivenZ => 1.0 / nx as f64,
                    Direction::ZGivenX if px[x] > 0.0 => joint.p(x, z) / px[x],
                    Direction::ZGivenX => 1.0 / nz as f64,
                };
            }
        }
        ConditionalTable {
            direction,
            nx,
            nz,
            table,
        }
    }

    pub fn uniform(direction: Direction, nx: usize, nz: usize) -> Self {
        let v = match direction {
            Direction::XGivenZ => 1.0 / nx as f64,
            Direction::ZGivenX => 1.0 / nz as f64,
        };
        ConditionalTable {
            direction,
            nx,
            nz,
            table: vec![v; nx * nz],
        }
    }

    /// Random strictly positive conditional.
    pub fn random(direction: Direction, nx: usize, nz: usize, rng: &mut Stream) -> Result<Self> {
        check_alphabet(nx, nz)?;
        let mut c = Self::uniform(direction, nx, nz);
        for v in c.table.iter_mut() {
            *v = rng.gen::<f64>() + 0.05;
        }
        c.normalize();
        Ok(c)
    }

    /// Convex mix `(1 - t) self + t other`, slice by slice.
    pub fn mix(&self, other: &ConditionalTable, t: f64) -> Result<Self> {
        if (self.direction, self.nx, self.nz) != (other.direction, other.nx, other.nz) {
            return Err(Error::shape("mixing conditionals of different layouts"));
        }
        let mut c = self.clone();
        for (a, b) in c.table.iter_mut().zip(&other.table) {
            *a = (1.0 - t) * *a + t * b;
        }
        c.normalize();
        Ok(c)
    }

    fn normalize(&mut self) {
        for i in 0..self.slices() {
            let total = sum(self.slice(i));
            let idx: Vec<usize> = match self.direction {
                Direction::XGivenZ => (0..self.nx).map(|x| x * self.nz + i).collect(),
                Direction::ZGivenX => (0..self.nz).map(|z| i * self.nz + z).collect(),
            };
            for j in idx {
                self.table[j] /= total;
            }
        }
    }
}

fn check_layout(joint: &DiscreteJoint, model: &ConditionalTable) -> Result<()> {
    if (joint.nx, joint.nz) != (model.nx, model.nz) {
        return Err(Error::shape(format!(
            "joint is {}x{}, conditional is {}x{}",
            joint.nx, joint.nz, model.nx, model.nz
        )));
    }
    Ok(())
}

/// `-E_q[ln p(·|·)]` under the joint `q`: the reconstruction-loss upper
/// bound on the matching conditional entropy. Infinite when `p` assigns
/// zero to an outcome `q` can produce.
pub fn cross_bound(joint: &DiscreteJoint, model: &ConditionalTable) -> Result<f64> {
    check_layout(joint, model)?;
    let mut terms = Vec::new();
    for x in 0..joint.nx {
        for z in 0..joint.nz {
            let q = joint.p(x, z);
            if q > 0.0 {
                let p = model.p(x, z);
                if p == 0.0 {
                    return Ok(f64::INFINITY);
                }
                terms.push(-q * p.ln());
            }
        }
    }
    Ok(sum(terms))
}

/// Expected KL between the joint's conditional and the model conditional,
/// averaged over the conditioning marginal; the exact gap in
/// [`cross_bound`].
pub fn expected_kl_gap(joint: &DiscreteJoint, model: &ConditionalTable) -> Result<f64> {
    check_layout(joint, model)?;
    let truth = ConditionalTable::from_joint(joint, model.direction);
    let weights = match model.direction {
        Direction::XGivenZ => joint.marginal_z(),
        Direction::ZGivenX => joint.marginal_x(),
    };
    let mut terms = Vec::new();
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            terms.push(w * kl(&truth.slice(i), &model.slice(i))?);
        }
    }
    Ok(sum(terms))
}

/// `I(X, Z)` from the joint and its marginals.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let px = joint.marginal_x();
    let pz = joint.marginal_z();
    let mut terms = Vec::new();
    for x in 0..joint.nx {
        for z in 0..joint.nz {
            terms.push(xlnx_ratio(joint.p(x, z), px[x] * pz[z]));
        }
    }
    sum(terms)
}

/// `KL(p ‖ q)`; requires `support(p) ⊆ support(q)`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("kl over {} and {} outcomes", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    if let Some(i) = (0..p.len()).find(|&i| p[i] > 0.0 && q[i] == 0.0) {
        return Err(Error::Support(format!("p({i}) = {} but q({i}) = 0", p[i])));
    }
    Ok(sum(p.iter().zip(q).map(|(&a, &b)| xlnx_ratio(a, b))).max(0.0))
}

/// Jensen-Shannon divergence; always finite and at most `ln 2`.
pub fn js(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("js over {} and {} outcomes", p.len(), q.len())));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl(p, &m)? + 0.5 * kl(q, &m)?)
}

/// One randomized bound check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: usize,
    pub nx: usize,
    pub nz: usize,
    pub direction: Direction,
    pub entropy: f64,
    pub bound: f64,
    pub kl_gap: f64,
    /// The bound holds, its gap equals the expected KL, and the two vanish
    /// together.
    pub pass: bool,
}

/// Random joints paired with either their own conditional (gap zero) or a
/// perturbed one, checked to `tol`.
pub fn verify_bounds(trials: usize, max_alphabet: usize, seed: u64, tol: f64) -> Result<Vec<BoundTrial>> {
    check_alphabet(max_alphabet, max_alphabet)?;
    let mut rng = Stream::from_seed(seed);
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let nx = rng.gen_range(1..=max_alphabet);
        let nz = rng.gen_range(1..=max_alphabet);
        let direction = if trial % 2 == 0 { Direction::XGivenZ } else { Direction::ZGivenX };
        let joint = DiscreteJoint::random(nx, nz, 0.3, &mut rng)?;
        let truth = ConditionalTable::from_joint(&joint, direction);
        let model = match trial % 4 {
            0 | 1 => truth,
            _ => {
                let noise = ConditionalTable::random(direction, nx, nz, &mut rng)?;
                truth.mix(&noise, rng.gen_range(0.05..1.0))?
            }
        };
        let entropy = conditional_entropy(&joint, direction);
        let bound = cross_bound(&joint, &model)?;
        let kl_gap = expected_kl_gap(&joint, &model)?;
        let diff = bound - entropy;
        let pass = diff >= -tol && (diff - kl_gap).abs() <= tol && ((diff.abs() <= tol) == (kl_gap <= tol));
        out.push(BoundTrial {
            trial,
            nx,
            nz,
            direction,
            entropy,
            bound,
            kl_gap,
            pass,
        });
    }
    Ok(out)
}

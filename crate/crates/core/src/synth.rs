//! Synthetic trace corpora drawn from two class-template Markov chains.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::dirichlet::draw_rng;
use crate::error::{invalid_input, invalid_param, Result};
use crate::pipeline::{LabeledCounts, ManifestEntry};
use crate::trace::{count_transitions, InstructionSequence};

/// One mnemonic per Cat1 category, in index order, with sample operands.
const CAT1_EMIT: [&str; 8] = [
    "add eax, ebx",
    "xor ecx, ecx",
    "cli",
    "jmp 0x401000",
    "mov eax, [ebp+8]",
    "push ebp",
    "nop",
    "cpuid",
];

const STREAM_SALT: u64 = 0x5EED_C0DE_1234_ABCD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub c: usize,
    /// Row-major c×c transition template for benign programs.
    pub benign: Vec<f64>,
    pub malicious: Vec<f64>,
    /// Per-program matrices are row-wise Dirichlet(concentration · template row).
    /// `None` uses the template itself for every program.
    pub benign_concentration: Option<f64>,
    pub malicious_concentration: Option<f64>,
    pub per_class: usize,
    /// Instructions per trace.
    pub length: usize,
    pub seed: u64,
}

fn emphasis_row(c: usize, peak: usize, weight: f64) -> Vec<f64> {
    let mut row = vec![1.0; c];
    row[peak] += weight;
    let s: f64 = row.iter().sum();
    row.iter().map(|v| v / s).collect()
}

/// Template whose row `j` favors the move to `shift(j)`.
pub fn shifted_template(c: usize, shift: impl Fn(usize) -> usize, weight: f64) -> Vec<f64> {
    (0..c).flat_map(|j| emphasis_row(c, shift(j) % c, weight)).collect()
}

impl SyntheticSpec {
    /// Two classes that share every transition row except the listed ones.
    pub fn contrast(c: usize, rows: &[usize], per_class: usize, length: usize, seed: u64) -> Self {
        let benign = shifted_template(c, |j| j + 1, 3.0);
        let mut malicious = benign.clone();
        for &j in rows {
            malicious[j * c..(j + 1) * c].copy_from_slice(&emphasis_row(c, (j + 2) % c, 3.0));
        }
        SyntheticSpec {
            c,
            benign,
            malicious,
            benign_concentration: Some(400.0),
            malicious_concentration: Some(100.0),
            per_class,
            length,
            seed,
        }
    }

    /// Both classes uniform; no signal.
    pub fn null(c: usize, per_class: usize, length: usize, seed: u64) -> Self {
        let u = vec![1.0 / c as f64; c * c];
        SyntheticSpec {
            c,
            benign: u.clone(),
            malicious: u,
            benign_concentration: None,
            malicious_concentration: None,
            per_class,
            length,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(invalid_param("need at least 2 categories"));
        }
        for (name, t) in [("benign", &self.benign), ("malicious", &self.malicious)] {
            check_stochastic(t, self.c).map_err(|e| invalid_input(format!("{name} template: {e}")))?;
        }
        for conc in [self.benign_concentration, self.malicious_concentration]
            .into_iter()
            .flatten()
        {
            if !(conc > 0.0 && conc.is_finite()) {
                return Err(invalid_param("concentration must be positive and finite"));
            }
        }
        if self.per_class == 0 || self.length < 2 {
            return Err(invalid_param(
                "need at least one program per class and two instructions per trace",
            ));
        }
        Ok(())
    }
}

fn check_stochastic(t: &[f64], c: usize) -> std::result::Result<(), String> {
    if t.len() != c * c {
        return Err(format!("expected {} entries, got {}", c * c, t.len()));
    }
    for (j, row) in t.chunks(c).enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(format!("row {j} has a negative or non-finite entry"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!("row {j} sums to {s}, not 1"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProgram {
    pub id: String,
    pub malicious: bool,
    pub sequence: InstructionSequence,
}

impl SyntheticProgram {
    pub fn labeled_counts(&self, c: usize) -> Result<LabeledCounts> {
        Ok(LabeledCounts {
            id: self.id.clone(),
            counts: count_transitions(&self.sequence, c)?,
            malicious: self.malicious,
        })
    }
}

fn perturb(template: &[f64], c: usize, conc: Option<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let Some(conc) = conc else {
        return template.to_vec();
    };
    let mut p = Vec::with_capacity(template.len());
    for row in template.chunks(c) {
        let start = p.len();
        for &t in row {
            p.push(if t > 0.0 {
                Gamma::new(conc * t, 1.0).expect("shape is positive").sample(rng)
            } else {
                0.0
            });
        }
        let s: f64 = p[start..].iter().sum();
        if s > 0.0 {
            p[start..].iter_mut().for_each(|v| *v /= s);
        } else {
            p[start..].copy_from_slice(row);
        }
    }
    p
}

/// Simulate a category chain of `length` steps from a uniform start state.
pub fn simulate_chain(p: &[f64], c: usize, length: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    check_stochastic(p, c).map_err(invalid_input)?;
    let rows = p
        .chunks(c)
        .map(|r| WeightedIndex::new(r).map_err(|e| invalid_input(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut seq = Vec::with_capacity(length);
    if length == 0 {
        return Ok(seq);
    }
    let mut state = rng.random_range(0..c);
    seq.push(state);
    for _ in 1..length {
        state = rows[state].sample(rng);
        seq.push(state);
    }
    Ok(seq)
}

/// Benign programs first, then malicious. Deterministic in the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticProgram>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(2 * spec.per_class);
    for (class, (template, conc)) in [
        (&spec.benign, spec.benign_concentration),
        (&spec.malicious, spec.malicious_concentration),
    ]
    .into_iter()
    .enumerate()
    {
        for i in 0..spec.per_class {
            let index = class * spec.per_class + i;
            let mut rng = draw_rng(spec.seed ^ STREAM_SALT, index as u64);
            let p = perturb(template, spec.c, conc, &mut rng);
            let id = format!("prog_{index:05}");
            let seq = simulate_chain(&p, spec.c, spec.length, &mut rng)?;
            out.push(SyntheticProgram {
                sequence: InstructionSequence::new(id.clone(), seq),
                id,
                malicious: class == 1,
            });
        }
    }
    Ok(out)
}

/// Write each program as a trace file under `dir/traces/` and a
/// `dir/manifest.txt` listing them. Only 8-category corpora can be written,
/// since the emitted mnemonics follow the built-in Cat1 map.
pub fn write_corpus(dir: impl AsRef<Path>, programs: &[SyntheticProgram]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces)?;
    let mut entries = Vec::with_capacity(programs.len());
    for p in programs {
        if let Some(&bad) = p.sequence.categories.iter().find(|&&k| k >= CAT1_EMIT.len()) {
            return Err(invalid_input(format!("category {bad} has no Cat1 mnemonic")));
        }
        let rel = PathBuf::from("traces").join(format!("{}.trace", p.id));
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(&rel))?);
        for &k in &p.sequence.categories {
            writeln!(w, "{}", CAT1_EMIT[k])?;
        }
        w.flush()?;
        entries.push(ManifestEntry {
            path: rel,
            malicious: p.malicious,
        });
    }
    let manifest = dir.join("manifest.txt");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    for e in &entries {
        writeln!(w, "{} {}", e.path.display(), u8::from(e.malicious))?;
    }
    w.flush()?;
    Ok(manifest)
}

//! Trace ingestion: instruction mnemonics to category sequences, and Markov
//! transition counts over those categories.
//!
//! A trace file is UTF-8 text with one executed instruction per line. The
//! first whitespace-delimited token is the mnemonic; anything after it
//! (operands, addresses) is ignored. Blank lines and lines starting with `#`
//! are skipped. A leading `rep`/`repe`/`repne`/`lock` prefix is folded into
//! the mnemonic lookup: the map is first asked for the prefixed form
//! (`"rep movsb"`) and falls back to the bare mnemonic.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};

/// The four instruction categorizations, coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Categorization {
    Cat1,
    Cat2,
    Cat3,
    Cat4,
}

impl Categorization {
    /// Number of categories this categorization defines.
    pub fn num_categories(self) -> usize {
        match self {
            Categorization::Cat1 => 8,
            Categorization::Cat2 => 56,
            Categorization::Cat3 => 86,
            Categorization::Cat4 => 122,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Categorization::Cat1 => "cat1",
            Categorization::Cat2 => "cat2",
            Categorization::Cat3 => "cat3",
            Categorization::Cat4 => "cat4",
        }
    }
}

impl std::str::FromStr for Categorization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cat1" | "1" => Ok(Categorization::Cat1),
            "cat2" | "2" => Ok(Categorization::Cat2),
            "cat3" | "3" => Ok(Categorization::Cat3),
            "cat4" | "4" => Ok(Categorization::Cat4),
            other => Err(invalid_input(format!("unknown categorization '{other}'"))),
        }
    }
}

/// Categorization 1 class names, in index order.
pub const CAT1_NAMES: [&str; 8] = ["math", "logic", "priv", "branch", "memory", "stack", "nop", "other"];

const CAT1_TABLE: &[(usize, &[&str])] = &[
    (
        0,
        &[
            "add", "adc", "sub", "sbb", "mul", "imul", "div", "idiv", "inc", "dec", "neg", "cmp", "xadd", "aaa", "aas",
            "aam", "aad", "daa", "das", "cbw", "cwde", "cdqe", "cwd", "cdq", "cqo", "fadd", "faddp", "fiadd", "fsub",
            "fsubp", "fsubr", "fsubrp", "fisub", "fmul", "fmulp", "fimul", "fdiv", "fdivp", "fdivr", "fdivrp", "fidiv",
            "fsqrt", "fabs", "fchs", "fprem", "fprem1", "frndint", "fscale", "fsin", "fcos", "fsincos", "fptan",
            "fpatan", "f2xm1", "fyl2x", "fyl2xp1", "fcom", "fcomp", "fcompp", "fucom", "fucomp", "fucompp", "fcomi",
            "fcomip", "fucomi", "fucomip", "ftst", "fxam", "addss", "addsd", "addps", "addpd", "subss", "subsd",
            "subps", "subpd", "mulss", "mulsd", "mulps", "mulpd", "divss", "divsd", "divps", "divpd", "sqrtss",
            "sqrtsd", "minss", "maxss", "minsd", "maxsd", "paddb", "paddw", "paddd", "paddq", "psubb", "psubw",
            "psubd", "psubq", "pmullw", "pmulhw", "pmuludq", "comiss", "comisd", "ucomiss", "ucomisd",
        ],
    ),
    (
        1,
        &[
            "and", "or", "xor", "not", "test", "shl", "sal", "shr", "sar", "shld", "shrd", "rol", "ror", "rcl", "rcr",
            "bt", "bts", "btr", "btc", "bsf", "bsr", "bswap", "setz", "sete", "setnz", "setne", "setb", "setnae",
            "setc", "setae", "setnb", "setnc", "setbe", "setna", "seta", "setnbe", "setl", "setnge", "setge", "setnl",
            "setle", "setng", "setg", "setnle", "sets", "setns", "seto", "setno", "setp", "setpe", "setnp", "setpo",
            "pand", "pandn", "por", "pxor", "andps", "andpd", "andnps", "andnpd", "orps", "orpd", "xorps", "xorpd",
            "psllw", "pslld", "psllq", "psrlw", "psrld", "psrlq", "psraw", "psrad", "popcnt", "lzcnt", "tzcnt", "clc",
            "stc", "cmc", "cld", "std",
        ],
    ),
    (
        2,
        &[
            "cli", "sti", "hlt", "in", "ins", "insb", "insw", "insd", "out", "outs", "outsb", "outsw", "outsd", "lgdt",
            "sgdt", "lidt", "sidt", "lldt", "sldt", "ltr", "str", "lmsw", "smsw", "clts", "invd", "wbinvd", "invlpg",
            "rdmsr", "wrmsr", "rdpmc", "sysenter", "sysexit", "syscall", "sysret", "iret", "iretd", "iretq", "int",
            "int3", "into", "int1", "arpl", "lar", "lsl", "verr", "verw", "swapgs", "vmcall", "vmlaunch", "vmresume",
            "vmxoff", "vmxon",
        ],
    ),
    (
        3,
        &[
            "jmp", "ja", "jae", "jb", "jbe", "jc", "jcxz", "jecxz", "jrcxz", "je", "jg", "jge", "jl", "jle", "jna",
            "jnae", "jnb", "jnbe", "jnc", "jne", "jng", "jnge", "jnl", "jnle", "jno", "jnp", "jns", "jnz", "jo", "jp",
            "jpe", "jpo", "js", "jz", "call", "ret", "retn", "retf", "loop", "loope", "loopz", "loopne", "loopnz",
            "ljmp", "lcall",
        ],
    ),
    (
        4,
        &[
            "mov",
            "movzx",
            "movsx",
            "movsxd",
            "lea",
            "xchg",
            "cmpxchg",
            "cmpxchg8b",
            "cmpxchg16b",
            "movs",
            "movsb",
            "movsw",
            "movsd",
            "movsq",
            "stos",
            "stosb",
            "stosw",
            "stosd",
            "stosq",
            "lods",
            "lodsb",
            "lodsw",
            "lodsd",
            "lodsq",
            "cmps",
            "cmpsb",
            "cmpsw",
            "cmpsd",
            "cmpsq",
            "scas",
            "scasb",
            "scasw",
            "scasd",
            "scasq",
            "xlat",
            "xlatb",
            "cmova",
            "cmovae",
            "cmovb",
            "cmovbe",
            "cmovc",
            "cmove",
            "cmovg",
            "cmovge",
            "cmovl",
            "cmovle",
            "cmovna",
            "cmovnae",
            "cmovnb",
            "cmovnbe",
            "cmovnc",
            "cmovne",
            "cmovng",
            "cmovnge",
            "cmovnl",
            "cmovnle",
            "cmovno",
            "cmovnp",
            "cmovns",
            "cmovnz",
            "cmovo",
            "cmovp",
            "cmovpe",
            "cmovpo",
            "cmovs",
            "cmovz",
            "lds",
            "les",
            "lfs",
            "lgs",
            "lss",
            "fld",
            "fild",
            "fst",
            "fstp",
            "fist",
            "fistp",
            "fbld",
            "fbstp",
            "fxch",
            "fld1",
            "fldz",
            "fldpi",
            "fldl2e",
            "fldl2t",
            "fldlg2",
            "fldln2",
            "movd",
            "movq",
            "movaps",
            "movups",
            "movapd",
            "movupd",
            "movss",
            "movdqa",
            "movdqu",
            "movlps",
            "movhps",
            "movlpd",
            "movhpd",
            "movntq",
            "movnti",
            "movntps",
            "prefetch",
            "prefetchnta",
            "prefetcht0",
            "prefetcht1",
            "prefetcht2",
            "lahf",
            "sahf",
        ],
    ),
    (
        5,
        &[
            "push", "pop", "pusha", "pushad", "popa", "popad", "pushf", "pushfd", "pushfq", "popf", "popfd", "popfq",
            "enter", "leave",
        ],
    ),
    (6, &["nop", "fnop", "pause", "wait", "fwait"]),
];

/// Prefixes that may precede a mnemonic on the same line.
const PREFIXES: [&str; 6] = ["rep", "repe", "repz", "repne", "repnz", "lock"];

/// Mapping from instruction mnemonic to category index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    categorization: Categorization,
    names: Vec<String>,
    entries: HashMap<String, usize>,
    fallback: usize,
}

impl CategoryMap {
    /// Built-in Categorization 1 table. Unknown mnemonics map to `other`.
    pub fn cat1() -> Self {
        let mut entries = HashMap::new();
        for (cat, mnemonics) in CAT1_TABLE {
            for m in *mnemonics {
                entries.insert((*m).to_string(), *cat);
            }
        }
        CategoryMap {
            categorization: Categorization::Cat1,
            names: CAT1_NAMES.iter().map(|s| s.to_string()).collect(),
            entries,
            fallback: 7,
        }
    }

    /// Build a map from explicit parts, validating every index.
    pub fn new(
        categorization: Categorization,
        names: Vec<String>,
        entries: HashMap<String, usize>,
        fallback: usize,
    ) -> Result<Self> {
        let c = categorization.num_categories();
        if names.len() != c {
            return Err(invalid_input(format!(
                "{} requires {c} categories, got {}",
                categorization.name(),
                names.len()
            )));
        }
        if let Some((m, &i)) = entries.iter().find(|(_, &i)| i >= c) {
            return Err(invalid_input(format!("mnemonic '{m}' maps to index {i} >= {c}")));
        }
        if fallback >= c {
            return Err(invalid_input(format!("fallback index {fallback} >= {c}")));
        }
        let entries = entries.into_iter().map(|(k, v)| (k.to_ascii_lowercase(), v)).collect();
        Ok(CategoryMap {
            categorization,
            names,
            entries,
            fallback,
        })
    }

    /// Parse a category map file.
    ///
    /// ```text
    /// # comments allowed
    /// categorization cat2
    /// categories asc add and priv bit call ...
    /// fallback math_other
    /// add add
    /// rep movsb rep_movs
    /// ```
    ///
    /// `categorization` and `categories` must precede the mnemonic lines.
    /// `fallback` is optional and defaults to the last category.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut categorization = None;
        let mut names: Option<Vec<String>> = None;
        let mut fallback_name: Option<String> = None;
        let mut entries = HashMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = trimmed.split_whitespace().collect();
            let err = |msg: String| Error::Parse {
                line: lineno + 1,
                column: 1,
                msg,
            };
            match toks[0] {
                "categorization" => {
                    let id = toks.get(1).ok_or_else(|| err("missing categorization id".into()))?;
                    categorization = Some(id.parse::<Categorization>()?);
                }
                "categories" => names = Some(toks[1..].iter().map(|s| s.to_string()).collect()),
                "fallback" => {
                    fallback_name = Some(
                        toks.get(1)
                            .ok_or_else(|| err("missing fallback name".into()))?
                            .to_string(),
                    )
                }
                _ => {
                    let names = names
                        .as_ref()
                        .ok_or_else(|| err("mnemonic line before 'categories' header".into()))?;
                    let (mnemonic, cat) = match toks.as_slice() {
                        [m, c] => (m.to_ascii_lowercase(), *c),
                        [p, m, c] if PREFIXES.contains(&p.to_ascii_lowercase().as_str()) => {
                            (format!("{} {}", p.to_ascii_lowercase(), m.to_ascii_lowercase()), *c)
                        }
                        _ => return Err(err(format!("expected '<mnemonic> <category>', got '{trimmed}'"))),
                    };
                    let idx = names
                        .iter()
                        .position(|n| n == cat)
                        .ok_or_else(|| err(format!("unknown category '{cat}'")))?;
                    entries.insert(mnemonic, idx);
                }
            }
        }
        let categorization = categorization.ok_or_else(|| invalid_input("map file lacks 'categorization' line"))?;
        let names = names.ok_or_else(|| invalid_input("map file lacks 'categories' header"))?;
        let fallback = match fallback_name {
            Some(f) => names
                .iter()
                .position(|n| *n == f)
                .ok_or_else(|| invalid_input(format!("unknown fallback category '{f}'")))?,
            None => names.len().saturating_sub(1),
        };
        CategoryMap::new(categorization, names, entries, fallback)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(f))
    }

    pub fn categorization(&self) -> Categorization {
        self.categorization
    }

    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn fallback(&self) -> usize {
        self.fallback
    }

    /// Category index of a name, if present.
    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Category for one trace line (mnemonic plus ignored operands).
    /// Returns `None` for blank and comment lines.
    pub fn categorize_line(&self, line: &str) -> Option<usize> {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            return None;
        }
        let mut toks = trimmed.split_whitespace();
        let first = toks.next()?.to_ascii_lowercase();
        if PREFIXES.contains(&first.as_str()) {
            if let Some(base) = toks.next() {
                let base = base.to_ascii_lowercase();
                let key = format!("{first} {base}");
                if let Some(&c) = self.entries.get(&key) {
                    return Some(c);
                }
                return Some(self.lookup(&base));
            }
        }
        Some(self.lookup(&first))
    }

    /// Category of a lowercase mnemonic, using the fallback for unknowns.
    pub fn lookup(&self, mnemonic: &str) -> usize {
        match self.entries.get(mnemonic) {
            Some(&c) => c,
            None => self.fallback,
        }
    }
}

/// Ordered category indices for one executed program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSequence {
    pub source_id: String,
    pub categories: Vec<usize>,
}

impl InstructionSequence {
    pub fn new(source_id: impl Into<String>, categories: Vec<usize>) -> Self {
        InstructionSequence {
            source_id: source_id.into(),
            categories,
        }
    }

    /// Instruction count.
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Parse a line-oriented trace into its category sequence.
pub fn parse_trace<R: BufRead>(
    reader: R,
    map: &CategoryMap,
    source_id: impl Into<String>,
) -> Result<InstructionSequence> {
    let mut categories = Vec::new();
    for line in reader.lines() {
        if let Some(c) = map.categorize_line(&line?) {
            categories.push(c);
        }
    }
    Ok(InstructionSequence::new(source_id, categories))
}

/// Parse a trace file from disk; the path becomes the source id.
pub fn parse_trace_file(path: impl AsRef<Path>, map: &CategoryMap) -> Result<InstructionSequence> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)?;
    parse_trace(std::io::BufReader::new(f), map, path.display().to_string())
}

/// Dense c×c matrix of transition counts between categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    c: usize,
    counts: Vec<u64>,
    m: u64,
    last: Option<usize>,
}

impl TransitionCounts {
    /// Empty counts: no instructions consumed.
    pub fn new(c: usize) -> Self {
        TransitionCounts {
            c,
            counts: vec![0; c * c],
            m: 0,
            last: None,
        }
    }

    /// Build from a row-major count matrix. `m` is taken as the number of
    /// instructions implied by the transitions (total + 1, or 0 when empty).
    pub fn from_matrix(c: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != c * c {
            return Err(invalid_input(format!(
                "count matrix has {} entries, expected {}",
                counts.len(),
                c * c
            )));
        }
        let total: u64 = counts.iter().sum();
        Ok(TransitionCounts {
            c,
            counts,
            m: if total == 0 { 0 } else { total + 1 },
            last: None,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.c
    }

    /// Instructions consumed.
    pub fn instructions(&self) -> u64 {
        self.m
    }

    /// Category of the most recent instruction, if any.
    pub fn last_category(&self) -> Option<usize> {
        self.last
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> u64 {
        self.counts[from * self.c + to]
    }

    pub fn row(&self, from: usize) -> &[u64] {
        &self.counts[from * self.c..(from + 1) * self.c]
    }

    /// Row-major counts.
    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Consume one more instruction, continuing from the stored last category.
    pub fn push(&mut self, next: usize) -> Result<()> {
        let prev = self.last;
        self.update(next, prev)
    }

    /// Record instruction `next`, with a transition from `prev` when present.
    pub fn update(&mut self, next: usize, prev: Option<usize>) -> Result<()> {
        if next >= self.c {
            return Err(invalid_input(format!("category {next} >= {}", self.c)));
        }
        if let Some(p) = prev {
            if p >= self.c {
                return Err(invalid_input(format!("category {p} >= {}", self.c)));
            }
            self.counts[p * self.c + next] += 1;
        }
        self.m += 1;
        self.last = Some(next);
        Ok(())
    }
}

/// Count adjacent category pairs in a sequence.
pub fn count_transitions(seq: &InstructionSequence, c: usize) -> Result<TransitionCounts> {
    let mut out = TransitionCounts::new(c);
    for &cat in &seq.categories {
        out.push(cat)?;
    }
    Ok(out)
}

/// Functional form of [`TransitionCounts::update`].
pub fn update_counts(mut counts: TransitionCounts, next: usize, prev: Option<usize>) -> Result<TransitionCounts> {
    counts.update(next, prev)?;
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(name: &str) -> usize {
        CAT1_NAMES.iter().position(|n| *n == name).unwrap()
    }

    #[test]
    fn parses_cat1_lines() {
        let map = CategoryMap::cat1();
        let text = "add eax, ebx\njmp 0x401000\npush eax\n";
        let seq = parse_trace(text.as_bytes(), &map, "t").unwrap();
        assert_eq!(seq.categories, vec![cat("math"), cat("branch"), cat("stack")]);
        assert_eq!(seq.len(), 3);
    }

    #[test]
    fn empty_stream() {
        let seq = parse_trace("".as_bytes(), &CategoryMap::cat1(), "t").unwrap();
        assert!(seq.is_empty());
    }

    #[test]
    fn unknown_mnemonic_falls_back_to_other() {
        let text = "mov eax, 1\nfrobnicate 7\nnop\nxor eax, eax\ncli\n";
        let seq = parse_trace(text.as_bytes(), &CategoryMap::cat1(), "t").unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.categories[1], cat("other"));
        assert_eq!(seq.categories[4], cat("priv"));
    }

    #[test]
    fn skips_blank_and_comment_lines_and_ignores_case() {
        let text = "# header\n\n   \nMOV eax, 1\n  Push ebp\n";
        let seq = parse_trace(text.as_bytes(), &CategoryMap::cat1(), "t").unwrap();
        assert_eq!(seq.categories, vec![cat("memory"), cat("stack")]);
    }

    #[test]
    fn rep_prefix_collapses_to_base() {
        let seq = parse_trace("rep movsb\nlock add [eax], 1\n".as_bytes(), &CategoryMap::cat1(), "t").unwrap();
        assert_eq!(seq.categories, vec![cat("memory"), cat("math")]);
    }

    #[test]
    fn counts_hand_example() {
        let seq = InstructionSequence::new("t", vec![0, 1, 0, 1]);
        let z = count_transitions(&seq, 2).unwrap();
        assert_eq!(z.as_slice(), &[0, 2, 1, 0]);
        assert_eq!(z.instructions(), 4);
    }

    #[test]
    fn single_instruction_has_no_transitions() {
        let z = count_transitions(&InstructionSequence::new("t", vec![3]), 8).unwrap();
        assert_eq!(z.total(), 0);
        assert_eq!(z.instructions(), 1);
    }

    #[test]
    fn out_of_range_category_rejected() {
        let seq = InstructionSequence::new("t", vec![0, 2]);
        assert!(matches!(count_transitions(&seq, 2), Err(Error::InvalidInput(_))));
        let z = TransitionCounts::new(2);
        assert!(update_counts(z.clone(), 5, None).is_err());
        assert!(update_counts(z, 0, Some(9)).is_err());
    }

    #[test]
    fn update_examples() {
        let z = count_transitions(&InstructionSequence::new("t", vec![0, 1, 0, 1]), 2).unwrap();
        let z = update_counts(z, 1, Some(1)).unwrap();
        assert_eq!(z.as_slice(), &[0, 2, 1, 1]);
        assert_eq!(z.instructions(), 5);

        let z = update_counts(TransitionCounts::new(2), 0, None).unwrap();
        assert_eq!(z.total(), 0);
        assert_eq!(z.instructions(), 1);
    }

    #[test]
    fn map_file_roundtrip_and_rep_classes() {
        let names: Vec<String> = (0..56).map(|i| format!("k{i}")).collect();
        let text = format!(
            "# test map\ncategorization cat2\ncategories {}\nfallback k0\nmovsb k3\nrep movsb k4\nADD k5\n",
            names.join(" ")
        );
        let map = CategoryMap::parse(text.as_bytes()).unwrap();
        assert_eq!(map.num_categories(), 56);
        assert_eq!(map.categorization(), Categorization::Cat2);
        let seq = parse_trace("movsb\nrep movsb\nrepne movsb\nadd\nwhat\n".as_bytes(), &map, "t").unwrap();
        assert_eq!(seq.categories, vec![3, 4, 3, 5, 0]);
    }

    #[test]
    fn map_file_errors() {
        let bad_count = "categorization cat2\ncategories a b\n";
        assert!(CategoryMap::parse(bad_count.as_bytes()).is_err());
        let unknown_cat = "categorization cat1\ncategories a b c d e f g h\nadd zz\n";
        assert!(matches!(
            CategoryMap::parse(unknown_cat.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        let no_header = "add a\n";
        assert!(CategoryMap::parse(no_header.as_bytes()).is_err());
    }

    #[test]
    fn cat1_invariants() {
        let map = CategoryMap::cat1();
        assert_eq!(map.num_categories(), 8);
        assert_eq!(map.names()[map.fallback()], "other");
        assert!(map.entries.values().all(|&i| i < 8));
    }
}

//! Synthetic tasks and the bundled character corpus.
//!
//! The model sees token sets, not sequences: without positional signal a
//! token's order is invisible to it. Tasks that depend on order therefore
//! fuse the order information into the token itself (an address or an
//! offset), and every task places its targets on dedicated query tokens.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::model::parse_field;

/// Public-domain novel text, lowercased and folded to ASCII.
pub const CORPUS: &str = include_str!("../../data/whale.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    ShuffledCls,
    CharLm,
    DistractorQa,
}

impl TaskKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(TaskKind::Copy),
            "shuffled_cls" => Some(TaskKind::ShuffledCls),
            "char_lm" => Some(TaskKind::CharLm),
            "distractor_qa" => Some(TaskKind::DistractorQa),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::ShuffledCls => "shuffled_cls",
            TaskKind::CharLm => "char_lm",
            TaskKind::DistractorQa => "distractor_qa",
        }
    }

    /// Whether bits-per-char and perplexity are the headline metrics.
    pub fn is_lm(self) -> bool {
        self == TaskKind::CharLm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7452_4149_4e00_0001,
            Split::Dev => 0x6445_5600_0000_0002,
            Split::Test => 0x7445_5354_0000_0003,
        }
    }
}

/// Task description. `seq_len` is the number of content tokens: source
/// symbols for copy, bag size for classification, context window for the
/// character model, haystack size for retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Symbol alphabet size (copy, classification).
    pub vocab: usize,
    /// Largest supported `seq_len`; fixes the address range of copy.
    pub max_len: usize,
    /// Share of filler positions replaced by distractor needles.
    pub noise: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Retrieval alphabet sizes.
pub const QA_KEYS: usize = 8;
pub const QA_VALUES: usize = 8;
pub const QA_FILLERS: usize = 16;

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let base = Self {
            kind,
            seq_len: 32,
            vocab: 16,
            max_len: 32,
            noise: 0.0,
            train_size: 20_000,
            dev_size: 256,
            test_size: 256,
            seed: 0,
        };
        match kind {
            TaskKind::Copy => base,
            TaskKind::ShuffledCls => Self { seq_len: 24, max_len: 24, vocab: 8, ..base },
            TaskKind::CharLm => Self { seq_len: 16, max_len: 16, train_size: 100_000, dev_size: 512, test_size: 2048, ..base },
            TaskKind::DistractorQa => Self { seq_len: 128, max_len: 1024, noise: 0.0, ..base },
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.seq_len == 0 {
            return Err(Error::Config("task_len: must be positive".into()));
        }
        if self.seq_len > self.max_len {
            return Err(Error::Config(format!(
                "task_len: {} exceeds task_max_len {}",
                self.seq_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config("task_noise: must lie in [0, 1]".into()));
        }
        match self.kind {
            TaskKind::Copy if self.vocab == 0 => Err(Error::Config("task_vocab: must be positive".into())),
            TaskKind::ShuffledCls if self.vocab < 2 || self.seq_len < 2 => {
                Err(Error::Config("task_vocab and task_len must be at least 2".into()))
            }
            TaskKind::CharLm if self.seq_len != self.max_len => {
                Err(Error::Config("task_len: the character window is fixed by task_max_len".into()))
            }
            TaskKind::DistractorQa if self.seq_len < 2 => {
                Err(Error::Config("task_len: retrieval needs at least 2 tokens".into()))
            }
            _ => Ok(()),
        }
    }

    /// Model vocabulary needed by this task.
    pub fn model_vocab(&self) -> usize {
        match self.kind {
            // symbols, addresses, fused (address, symbol), separator
            TaskKind::Copy => self.vocab + self.max_len + self.max_len * self.vocab + 1,
            // symbols, CLS, two labels
            TaskKind::ShuffledCls => self.vocab + 3,
            // plain chars (targets), fused (offset, char), query
            TaskKind::CharLm => {
                let c = charset().len();
                c + self.max_len * c + 1
            }
            // needles, questions, answers, fillers
            TaskKind::DistractorQa => QA_KEYS * QA_VALUES + QA_KEYS + QA_VALUES + QA_FILLERS,
        }
    }

    pub fn with_len(&self, len: usize) -> Self {
        Self { seq_len: len, ..self.clone() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "task" => {
                self.kind = TaskKind::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("task: unknown task {value:?}")))?
            }
            "task_len" => self.seq_len = parse_field(key, value)?,
            "task_vocab" => self.vocab = parse_field(key, value)?,
            "task_max_len" => self.max_len = parse_field(key, value)?,
            "task_noise" => self.noise = parse_field(key, value)?,
            "task_train_size" => self.train_size = parse_field(key, value)?,
            "task_dev_size" => self.dev_size = parse_field(key, value)?,
            "task_test_size" => self.test_size = parse_field(key, value)?,
            "task_seed" => self.seed = parse_field(key, value)?,
            _ => return Err(Error::Config(format!("{key}: unknown task key"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.kind.name().to_string()),
            ("task_len", self.seq_len.to_string()),
            ("task_vocab", self.vocab.to_string()),
            ("task_max_len", self.max_len.to_string()),
            ("task_noise", self.noise.to_string()),
            ("task_train_size", self.train_size.to_string()),
            ("task_dev_size", self.dev_size.to_string()),
            ("task_test_size", self.test_size.to_string()),
            ("task_seed", self.seed.to_string()),
        ]
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        }
    }
}

pub const TASK_KEYS: &[&str] = &[
    "task",
    "task_len",
    "task_vocab",
    "task_max_len",
    "task_noise",
    "task_train_size",
    "task_dev_size",
    "task_test_size",
    "task_seed",
];

/// One sequence with optional per-token targets.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Sorted distinct characters of the corpus.
pub fn charset() -> Vec<char> {
    static SET: OnceLock<Vec<char>> = OnceLock::new();
    SET.get_or_init(|| {
        let mut c: Vec<char> = CORPUS.chars().collect();
        c.sort_unstable();
        c.dedup();
        c
    })
    .clone()
}

/// Corpus as character indices into [`charset`].
pub fn corpus_ids() -> Vec<usize> {
    let set = charset();
    CORPUS.chars().map(|ch| set.binary_search(&ch).expect("char in set")).collect()
}

/// Character ranges of the three splits: 90% / 5% / 5% of the corpus.
pub fn corpus_range(split: Split, len: usize) -> std::ops::Range<usize> {
    let a = len * 9 / 10;
    let b = len * 19 / 20;
    match split {
        Split::Train => 0..a,
        Split::Dev => a..b,
        Split::Test => b..len,
    }
}

/// Generates the split of `spec` deterministically from `spec.seed`.
pub fn gen_split(spec: &TaskSpec, split: Split) -> Result<Vec<Example>, Error> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ split.tag());
    let count = spec.split_size(split);
    Ok(match spec.kind {
        TaskKind::Copy => (0..count).map(|_| copy_example(spec, &mut rng)).collect(),
        TaskKind::ShuffledCls => (0..count).map(|_| cls_example(spec, &mut rng)).collect(),
        TaskKind::CharLm => {
            let ids = corpus_ids();
            let range = corpus_range(split, ids.len());
            (0..count).map(|_| char_example(spec, &ids, range.clone(), &mut rng)).collect()
        }
        TaskKind::DistractorQa => (0..count).map(|_| qa_example(spec, &mut rng)).collect(),
    })
}

pub fn gen_task(spec: &TaskSpec) -> Result<Dataset, Error> {
    Ok(Dataset {
        spec: spec.clone(),
        train: gen_split(spec, Split::Train)?,
        dev: gen_split(spec, Split::Dev)?,
        test: gen_split(spec, Split::Test)?,
    })
}

/// Token ids of the copy task.
pub struct CopyVocab {
    pub symbols: usize,
    pub max_len: usize,
}

impl CopyVocab {
    pub fn symbol(&self, s: usize) -> usize {
        s
    }
    pub fn address(&self, a: usize) -> usize {
        self.symbols + a
    }
    pub fn fused(&self, a: usize, s: usize) -> usize {
        self.symbols + self.max_len + a * self.symbols + s
    }
    pub fn separator(&self) -> usize {
        self.symbols + self.max_len + self.max_len * self.symbols
    }
}

/// `[(a, s_a) for a in 0..L] SEP [a for a in 0..L]`; the target of query `a`
/// is `s_a`.
fn copy_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let v = CopyVocab { symbols: spec.vocab, max_len: spec.max_len };
    let l = spec.seq_len;
    let symbols: Vec<usize> = (0..l).map(|_| rng.random_range(0..spec.vocab)).collect();
    let mut tokens = Vec::with_capacity(2 * l + 1);
    let mut targets = Vec::with_capacity(2 * l + 1);
    for (a, &s) in symbols.iter().enumerate() {
        tokens.push(v.fused(a, s));
        targets.push(None);
    }
    tokens.push(v.separator());
    targets.push(None);
    for (a, &s) in symbols.iter().enumerate() {
        tokens.push(v.address(a));
        targets.push(Some(v.symbol(s)));
    }
    Example { tokens, targets }
}

/// Bag of symbols plus a trailing CLS token whose target is 1 when more
/// than half the symbols come from the lower half of the alphabet. Labels
/// are drawn uniformly first, so the classes are balanced.
fn cls_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let (v, l) = (spec.vocab, spec.seq_len);
    let low_half = v / 2;
    let label = rng.random_range(0..2usize);
    let low_count = loop {
        let k = rng.random_range(0..=l);
        if 2 * k == l {
            continue;
        }
        if (2 * k > l) == (label == 1) {
            break k;
        }
    };
    let mut tokens: Vec<usize> = (0..l)
        .map(|i| if i < low_count { rng.random_range(0..low_half) } else { rng.random_range(low_half..v) })
        .collect();
    tokens.shuffle(rng);
    tokens.push(v);
    let mut targets = vec![None; l];
    targets.push(Some(v + 1 + label));
    Example { tokens, targets }
}

/// Label of a classification example, recomputed from its tokens.
pub fn cls_label(spec: &TaskSpec, tokens: &[usize]) -> usize {
    let low = tokens.iter().filter(|&&t| t < spec.vocab / 2).count();
    let bag = tokens.iter().filter(|&&t| t < spec.vocab).count();
    usize::from(2 * low > bag)
}

/// Token ids of the character model.
pub struct CharVocab {
    pub chars: usize,
    pub window: usize,
}

impl CharVocab {
    pub fn plain(&self, c: usize) -> usize {
        c
    }
    /// Character `c` seen `offset` steps before the query, `offset ∈ 1..=window`.
    pub fn fused(&self, offset: usize, c: usize) -> usize {
        self.chars + (offset - 1) * self.chars + c
    }
    pub fn query(&self) -> usize {
        self.chars + self.window * self.chars
    }
}

/// A window of `W` characters, each fused with its distance to the query,
/// then a query token whose target is the next character.
fn char_example(spec: &TaskSpec, ids: &[usize], range: std::ops::Range<usize>, rng: &mut ChaCha8Rng) -> Example {
    let w = spec.seq_len;
    let v = CharVocab { chars: charset().len(), window: spec.max_len };
    let start = rng.random_range(range.start..range.end - w);
    let window = &ids[start..start + w];
    let mut tokens: Vec<usize> = window.iter().enumerate().map(|(i, &c)| v.fused(w - i, c)).collect();
    tokens.push(v.query());
    let mut targets = vec![None; w];
    targets.push(Some(v.plain(ids[start + w])));
    Example { tokens, targets }
}

/// Token ids of the retrieval task.
pub struct QaVocab;

impl QaVocab {
    pub fn needle(key: usize, value: usize) -> usize {
        key * QA_VALUES + value
    }
    pub fn question(key: usize) -> usize {
        QA_KEYS * QA_VALUES + key
    }
    pub fn answer(value: usize) -> usize {
        QA_KEYS * QA_VALUES + QA_KEYS + value
    }
    pub fn filler(f: usize) -> usize {
        QA_KEYS * QA_VALUES + QA_KEYS + QA_VALUES + f
    }
    /// `(key, value)` of a needle token.
    pub fn decode_needle(token: usize) -> Option<(usize, usize)> {
        (token < QA_KEYS * QA_VALUES).then_some((token / QA_VALUES, token % QA_VALUES))
    }
}

/// `L − 1` haystack tokens holding exactly one needle with the asked key,
/// then the question. Each other haystack token is a filler, or with
/// probability `noise` a needle for a different key.
fn qa_example(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let l = spec.seq_len;
    let key = rng.random_range(0..QA_KEYS);
    let value = rng.random_range(0..QA_VALUES);
    let slot = rng.random_range(0..l - 1);
    let mut tokens = Vec::with_capacity(l);
    for i in 0..l - 1 {
        if i == slot {
            tokens.push(QaVocab::needle(key, value));
        } else if rng.random::<f64>() < spec.noise {
            let other = (key + rng.random_range(1..QA_KEYS)) % QA_KEYS;
            tokens.push(QaVocab::needle(other, rng.random_range(0..QA_VALUES)));
        } else {
            tokens.push(QaVocab::filler(rng.random_range(0..QA_FILLERS)));
        }
    }
    tokens.push(QaVocab::question(key));
    let mut targets = vec![None; l - 1];
    targets.push(Some(QaVocab::answer(value)));
    Example { tokens, targets }
}

//! Speaker and Listener agents: {LSTM, Transformer} x {AT, NoAT}.
//!
//! NoAT is not a separate code path. Both variants run the same attention
//! machinery; NoAT simply feeds it a singleton key set (the mean-pooled
//! object vector), whose softmax is exactly [1.0]. That construction makes
//! the AT/NoAT parameter sets identical by design, which is the paper's
//! parity claim, and it keeps every analysis hook (attention records)
//! meaningful in both modes.

mod listener;
mod speaker;

pub use listener::{Listener, ListenerPass};
pub use speaker::{Speaker, SpeakerPass};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Binder, ParamId};
use crate::tensor::{Tape, Var};
use crate::{Real, RealTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Lstm,
    Transformer,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::Lstm => "lstm",
            Arch::Transformer => "transformer",
        }
    }
}

/// Whether an agent attends over all object patches (At) or over the single
/// mean-pooled vector (NoAt).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    At,
    NoAt,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::At => "at",
            Mode::NoAt => "noat",
        }
    }
}

/// Attention flavor in the listener's message-object matching step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Dot,
    ScaledDot,
}

impl MatchKind {
    pub fn tag(self) -> &'static str {
        match self {
            MatchKind::Dot => "dot",
            MatchKind::ScaledDot => "scaled_dot",
        }
    }

    /// Each architecture's native convention.
    pub fn default_for(arch: Arch) -> Self {
        match arch {
            Arch::Lstm => MatchKind::Dot,
            Arch::Transformer => MatchKind::ScaledDot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sizes {
    /// Vocabulary size.
    pub v: usize,
    /// Message length.
    pub t: usize,
    /// Hidden size.
    pub h: usize,
    /// Patches per object.
    pub a: usize,
    /// Feature dimension per patch.
    pub d: usize,
}

impl Sizes {
    pub fn validate(&self) -> Result<()> {
        if self.v < 2 || self.t == 0 || self.h == 0 || self.a == 0 || self.d == 0 {
            return Err(Error::Config(format!(
                "agent sizes must be positive (vocabulary >= 2), got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Everything needed to build one speaker-listener pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSpec {
    pub arch: Arch,
    pub speaker_mode: Mode,
    pub listener_mode: Mode,
    pub match_kind: MatchKind,
    pub sizes: Sizes,
}

impl PairSpec {
    pub fn manifest_text(&self, role: &str) -> String {
        let s = self.sizes;
        format!(
            "role = {role}\narch = {}\nspeaker_mode = {}\nlistener_mode = {}\nmatch = {}\n\
             v = {}\nt = {}\nh = {}\na = {}\nd = {}\n",
            self.arch.tag(),
            self.speaker_mode.tag(),
            self.listener_mode.tag(),
            self.match_kind.tag(),
            s.v,
            s.t,
            s.h,
            s.a,
            s.d
        )
    }
}

/// A fixed-length message of symbol ids below the vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    symbols: Vec<u16>,
}

impl Message {
    pub fn new(symbols: Vec<u16>, vocab: usize, len: usize) -> Result<Self> {
        if symbols.len() != len {
            return Err(Error::Contract(format!(
                "message of {} symbols where length {} is required",
                symbols.len(),
                len
            )));
        }
        if let Some(&bad) = symbols.iter().find(|&&s| usize::from(s) >= vocab) {
            return Err(Error::Contract(format!(
                "symbol id {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(Message { symbols })
    }

    pub fn symbols(&self) -> &[u16] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn render(&self) -> String {
        let parts: Vec<String> = self.symbols.iter().map(u16::to_string).collect();
        parts.join(" ")
    }
}

/// Per-symbol attention rows (each over the A object patches).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub rows: Vec<Vec<Real>>,
}

impl AttentionRecord {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// What the speaker emits for one object.
#[derive(Debug, Clone)]
pub struct SpeakerOutput {
    pub message: Message,
    /// T probability vectors over the vocabulary.
    pub step_distributions: Vec<Vec<Real>>,
    pub attention: AttentionRecord,
}

/// Symbol selection rule during generation.
pub enum Decode<'a> {
    Sample(&'a mut ChaCha8Rng),
    Greedy,
    /// Teacher-forced replay of a fixed message (loss graphs, analysis).
    Forced(&'a Message),
}

/// Draw an index from a probability row via inverse CDF.
pub(crate) fn sample_index(dist: &[Real], rng: &mut ChaCha8Rng) -> usize {
    let u: Real = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

pub(crate) fn argmax(xs: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Shared object encoder: every patch is linearly mapped D -> H and passed
/// through gelu. AT keeps the A vectors; NoAT pools them into one mean
/// vector, the singleton key set for downstream attention.
pub(crate) fn encode_object<'p>(
    tape: &mut Tape<'p, Real>,
    binder: &mut Binder<'p, Real>,
    w: ParamId,
    b: ParamId,
    patches: &'p RealTensor,
    mode: Mode,
) -> Result<Var> {
    let p = tape.leaf(patches)?;
    let wv = binder.var(tape, w)?;
    let bv = binder.var(tape, b)?;
    let lin = tape.matmul_tb(p, wv)?;
    let lin = tape.add(lin, bv)?;
    let enc = tape.gelu(lin)?;
    match mode {
        Mode::At => Ok(enc),
        Mode::NoAt => tape.mean_rows(enc),
    }
}

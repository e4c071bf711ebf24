//! Read-R / Write-W interleaving of fused representations and speech tokens.
//!
//! The text-to-speech model consumes fused representations in blocks of `R`
//! and emits speech tokens in blocks of `W`. Once every representation has
//! been read, the remaining speech tokens are flushed in blocks of `W`.
//!
//! Positions are 1-based throughout: speech token `i` may condition on the
//! first [`visible_prefix`]`(i, N, policy)` fused representations, which is
//!
//! ```text
//! min((floor((i - 1) / W) + 1) * R, N)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("read block size R must be >= 1")]
    ZeroRead,
    #[error("write block size W must be >= 1")]
    ZeroWrite,
    #[error("speech-token positions are 1-based; got 0")]
    ZeroPosition,
    #[error("at least one fused representation is required (N = 0)")]
    EmptyInput,
    #[error("malformed action `{0}`: expected R<count> or W<count> with count >= 1")]
    BadAction(String),
    #[error("invalid action sequence: {0}")]
    Invalid(String),
}

/// The `(R, W)` pair governing the interleaving cadence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct SchedulePolicy {
    read: usize,
    write: usize,
}

#[derive(Serialize, Deserialize)]
struct RawPolicy {
    read: usize,
    write: usize,
}

impl TryFrom<RawPolicy> for SchedulePolicy {
    type Error = ScheduleError;

    fn try_from(raw: RawPolicy) -> Result<Self, Self::Error> {
        SchedulePolicy::new(raw.read, raw.write)
    }
}

impl From<SchedulePolicy> for RawPolicy {
    fn from(p: SchedulePolicy) -> Self {
        RawPolicy { read: p.read, write: p.write }
    }
}

impl SchedulePolicy {
    pub fn new(read: usize, write: usize) -> Result<Self, ScheduleError> {
        if read == 0 {
            return Err(ScheduleError::ZeroRead);
        }
        if write == 0 {
            return Err(ScheduleError::ZeroWrite);
        }
        Ok(Self { read, write })
    }

    /// Fused representations consumed per read block.
    pub fn read(&self) -> usize {
        self.read
    }

    /// Speech tokens emitted per write block.
    pub fn write(&self) -> usize {
        self.write
    }
}

impl Default for SchedulePolicy {
    /// `R = 3`, `W = 10`.
    fn default() -> Self {
        Self { read: 3, write: 10 }
    }
}

/// Number of fused representations visible to speech token `position`
/// (1-based) when `n` representations exist in total.
pub fn visible_prefix(position: usize, n: usize, policy: SchedulePolicy) -> Result<usize, ScheduleError> {
    if position == 0 {
        return Err(ScheduleError::ZeroPosition);
    }
    let blocks = (position - 1) / policy.write + 1;
    Ok(blocks.saturating_mul(policy.read).min(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "count", rename_all = "lowercase")]
pub enum Action {
    Read(usize),
    Write(usize),
}

impl Action {
    pub fn count(&self) -> usize {
        match *self {
            Action::Read(c) | Action::Write(c) => c,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Read(c) => write!(f, "R{c}"),
            Action::Write(c) => write!(f, "W{c}"),
        }
    }
}

impl FromStr for Action {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScheduleError::BadAction(s.to_string());
        let (kind, digits) = s.split_at_checked(1).ok_or_else(bad)?;
        let count: usize = digits.parse().map_err(|_| bad())?;
        if count == 0 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        match kind {
            "R" => Ok(Action::Read(count)),
            "W" => Ok(Action::Write(count)),
            _ => Err(bad()),
        }
    }
}

/// Ordered READ/WRITE actions. Serializes compactly as `"R3 W10 R3 W10 W5"`
/// via `Display`/`FromStr`, and as a list of `{"action": .., "count": ..}`
/// records via serde.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionSequence(Vec<Action>);

impl ActionSequence {
    pub fn new(actions: Vec<Action>) -> Self {
        Self(actions)
    }

    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn push(&mut self, action: Action) {
        self.0.push(action);
    }

    pub fn total_reads(&self) -> usize {
        self.0
            .iter()
            .filter_map(|a| match a {
                Action::Read(c) => Some(*c),
                Action::Write(_) => None,
            })
            .sum()
    }

    pub fn total_writes(&self) -> usize {
        self.0
            .iter()
            .filter_map(|a| match a {
                Action::Write(c) => Some(*c),
                Action::Read(_) => None,
            })
            .sum()
    }

    /// For each written token, the number of representations read before it.
    pub fn implied_visibility(&self) -> Vec<usize> {
        let mut read = 0;
        let mut out = Vec::with_capacity(self.total_writes());
        for action in &self.0 {
            match *action {
                Action::Read(c) => read += c,
                Action::Write(c) => out.extend(std::iter::repeat_n(read, c)),
            }
        }
        out
    }

    /// Checks the sequence against every structural invariant of
    /// `build_sequence(n, m, policy)`.
    pub fn validate(&self, n: usize, m: usize, policy: SchedulePolicy) -> Result<(), ScheduleError> {
        let invalid = |msg: String| Err(ScheduleError::Invalid(msg));
        if n == 0 {
            return Err(ScheduleError::EmptyInput);
        }
        if self.0.iter().any(|a| a.count() == 0) {
            return invalid("zero-count action".into());
        }
        if !matches!(self.0.first(), Some(Action::Read(_))) {
            return invalid("sequence must start with READ".into());
        }
        if self.total_reads() != n {
            return invalid(format!("READ counts sum to {}, expected {n}", self.total_reads()));
        }
        if self.total_writes() != m {
            return invalid(format!("WRITE counts sum to {}, expected {m}", self.total_writes()));
        }

        let reads: Vec<usize> = self
            .0
            .iter()
            .filter_map(|a| match a {
                Action::Read(c) => Some(*c),
                _ => None,
            })
            .collect();
        if let Some((last, init)) = reads.split_last() {
            if init.iter().any(|&c| c != policy.read) || *last > policy.read {
                return invalid(format!("READ blocks must be {} except a shorter final block", policy.read));
            }
        }
        let writes: Vec<usize> = self
            .0
            .iter()
            .filter_map(|a| match a {
                Action::Write(c) => Some(*c),
                _ => None,
            })
            .collect();
        if let Some((last, init)) = writes.split_last() {
            if init.iter().any(|&c| c != policy.write) || *last > policy.write {
                return invalid(format!("WRITE blocks must be {} except a shorter final block", policy.write));
            }
        }
        // While writes remain, reads and writes alternate; two writes in a row
        // are legal only after every representation has been read.
        let mut read_so_far = 0;
        let mut prev_write = false;
        for action in &self.0 {
            match *action {
                Action::Read(c) => {
                    read_so_far += c;
                    prev_write = false;
                }
                Action::Write(_) => {
                    if prev_write && read_so_far < n {
                        return invalid("consecutive WRITE blocks before reads are exhausted".into());
                    }
                    prev_write = true;
                }
            }
        }

        let implied = self.implied_visibility();
        for (idx, &seen) in implied.iter().enumerate() {
            let expected = visible_prefix(idx + 1, n, policy)?;
            if seen != expected {
                return invalid(format!("speech token {} sees {seen} representations, expected {expected}", idx + 1));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ActionSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

impl FromStr for ActionSequence {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split_whitespace().map(str::parse).collect::<Result<Vec<_>, _>>().map(Self)
    }
}

/// Builds the interleaved action sequence for `n` fused representations and
/// `m` speech tokens.
///
/// Blocks of `R` reads alternate with blocks of `W` writes. If the reads run
/// out first the remaining writes are flushed in `W`-sized blocks; if the
/// writes run out first the remaining reads follow in `R`-sized blocks.
pub fn build_sequence(n: usize, m: usize, policy: SchedulePolicy) -> Result<ActionSequence, ScheduleError> {
    if n == 0 {
        return Err(ScheduleError::EmptyInput);
    }
    let mut seq = ActionSequence::default();
    let (mut read, mut written) = (0, 0);
    while read < n || written < m {
        if read < n {
            let c = policy.read.min(n - read);
            seq.push(Action::Read(c));
            read += c;
        }
        if written < m {
            let c = policy.write.min(m - written);
            seq.push(Action::Write(c));
            written += c;
        }
    }
    Ok(seq)
}

/// Per-position visibility counts for `m` speech tokens: element `i - 1` is
/// `visible_prefix(i, n, policy)`.
pub fn training_mask(n: usize, m: usize, policy: SchedulePolicy) -> Result<Vec<usize>, ScheduleError> {
    if n == 0 {
        return Err(ScheduleError::EmptyInput);
    }
    (1..=m).map(|i| visible_prefix(i, n, policy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(r: usize, w: usize) -> SchedulePolicy {
        SchedulePolicy::new(r, w).unwrap()
    }

    #[test]
    fn visible_prefix_examples() {
        assert_eq!(visible_prefix(1, 50, p(3, 10)), Ok(3));
        assert_eq!(visible_prefix(11, 50, p(3, 10)), Ok(6));
        assert_eq!(visible_prefix(1000, 50, p(3, 10)), Ok(50));
        assert_eq!(visible_prefix(6, 50, p(1, 5)), Ok(2));
        assert_eq!(visible_prefix(0, 50, p(1, 5)), Err(ScheduleError::ZeroPosition));
    }

    #[test]
    fn policy_rejects_zero() {
        assert_eq!(SchedulePolicy::new(0, 1), Err(ScheduleError::ZeroRead));
        assert_eq!(SchedulePolicy::new(1, 0), Err(ScheduleError::ZeroWrite));
        assert!(serde_json::from_str::<SchedulePolicy>(r#"{"read":0,"write":3}"#).is_err());
    }

    #[test]
    fn build_sequence_examples() {
        let seq = build_sequence(6, 25, p(3, 10)).unwrap();
        assert_eq!(seq.to_string(), "R3 W10 R3 W10 W5");
        // per-position oracle
        for (i, &v) in seq.implied_visibility().iter().enumerate() {
            assert_eq!(v, visible_prefix(i + 1, 6, p(3, 10)).unwrap());
        }
        assert_eq!(build_sequence(2, 1, p(3, 10)).unwrap().to_string(), "R2 W1");
        assert_eq!(build_sequence(3, 0, p(3, 10)).unwrap().to_string(), "R3");
        assert_eq!(build_sequence(1, 0, p(3, 10)).unwrap().to_string(), "R1");
        assert_eq!(build_sequence(0, 4, p(3, 10)), Err(ScheduleError::EmptyInput));
    }

    #[test]
    fn writes_exhausted_before_reads() {
        let seq = build_sequence(9, 5, p(3, 10)).unwrap();
        assert_eq!(seq.to_string(), "R3 W5 R3 R3");
        seq.validate(9, 5, p(3, 10)).unwrap();
    }

    #[test]
    fn training_mask_examples() {
        assert_eq!(training_mask(6, 12, p(3, 10)).unwrap(), vec![3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 6, 6]);
        assert_eq!(training_mask(3, 5, p(3, 10)).unwrap(), vec![3; 5]);
        assert!(training_mask(50, 0, p(3, 10)).unwrap().is_empty());
        assert_eq!(training_mask(0, 3, p(3, 10)), Err(ScheduleError::EmptyInput));
    }

    #[test]
    fn compact_form_parses_and_rejects_garbage() {
        let seq: ActionSequence = "R3 W10 R3 W10 W5".parse().unwrap();
        assert_eq!(seq, build_sequence(6, 25, p(3, 10)).unwrap());
        for bad in ["R0", "X3", "R", "W-1", "R+3", "R3W4"] {
            assert!(bad.parse::<ActionSequence>().is_err(), "{bad}");
        }
    }

    #[test]
    fn structured_form() {
        let seq = build_sequence(2, 1, p(3, 10)).unwrap();
        let json = serde_json::to_string(&seq).unwrap();
        assert_eq!(json, r#"[{"action":"read","count":2},{"action":"write","count":1}]"#);
    }

    #[test]
    fn validate_catches_bad_traces() {
        let policy = p(3, 10);
        let bad: ActionSequence = "R3 W10 W10 R3".parse().unwrap();
        assert!(bad.validate(6, 20, policy).is_err());
        let bad: ActionSequence = "W5 R3".parse().unwrap();
        assert!(bad.validate(3, 5, policy).is_err());
        let bad: ActionSequence = "R2 R1 W4".parse().unwrap();
        assert!(bad.validate(3, 4, policy).is_err());
    }

    proptest! {
        #[test]
        fn sequence_matches_mask(n in 1usize..=200, m in 0usize..=200, r in 1usize..=20, w in 1usize..=20) {
            let policy = p(r, w);
            let seq = build_sequence(n, m, policy).unwrap();
            prop_assert_eq!(seq.total_reads(), n);
            prop_assert_eq!(seq.total_writes(), m);
            prop_assert_eq!(seq.implied_visibility(), training_mask(n, m, policy).unwrap());
            prop_assert!(seq.validate(n, m, policy).is_ok());
            let reparsed: ActionSequence = seq.to_string().parse().unwrap();
            prop_assert_eq!(&reparsed, &seq);
            let json: ActionSequence = serde_json::from_str(&serde_json::to_string(&seq).unwrap()).unwrap();
            prop_assert_eq!(json, seq);
        }

        #[test]
        fn visibility_is_monotone_and_bounded(n in 1usize..=200, i in 1usize..=400, r in 1usize..=20, w in 1usize..=20) {
            let policy = p(r, w);
            let here = visible_prefix(i, n, policy).unwrap();
            let next = visible_prefix(i + 1, n, policy).unwrap();
            prop_assert!(here >= 1 && here <= n);
            prop_assert!(next >= here);
            if next != here {
                // increments land on block boundaries and are exactly R unless capped
                prop_assert_eq!(i % w, 0);
                prop_assert!(next - here == r || next == n);
            }
        }
    }
}

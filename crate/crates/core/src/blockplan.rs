//! Block partitions, sequence layouts and attention permissions.
//!
//! A sequence of `n` latent tokens is cut into blocks by
//! `block(i) = (i + shift) / block_size`. Training feeds
//! `(text, clean tokens, noisy tokens)` through the network at once; the
//! permission matrix lets noisy tokens of block `m` see only text, clean tokens
//! of earlier blocks and noisy tokens of block `m`, so every block's velocity
//! equals the one computed at inference time from `(text, Z^{<b_m}, Z_t^{b_m:e_m})`.
//!
//! Every layout here is judged by the same pairwise rule ([`permits`]); the
//! plans only differ in which tokens they contain and in what order.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::positions::PositionAssignment;

pub fn block_index(i: usize, block_size: usize, shift: usize) -> Result<usize> {
    ensure!(block_size >= 1, Input, "block size must be positive");
    ensure!(shift < block_size, Input, "shift {shift} must be below block size {block_size}");
    Ok((i + shift) / block_size)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    n_tokens: usize,
    block_size: usize,
    shift: usize,
    blocks: Vec<Range<usize>>,
}

impl BlockPartition {
    pub fn new(n_tokens: usize, block_size: usize, shift: usize) -> Result<Self> {
        ensure!(n_tokens >= 1, Input, "partition needs at least one token");
        block_index(0, block_size, shift)?;
        let mut blocks: Vec<Range<usize>> = Vec::new();
        let mut start = 0;
        for i in 1..=n_tokens {
            if i == n_tokens || (i + shift) / block_size != (start + shift) / block_size {
                blocks.push(start..i);
                start = i;
            }
        }
        Ok(Self {
            n_tokens,
            block_size,
            shift,
            blocks,
        })
    }

    /// Blocks of `block_size` tokens starting at 0; `block_size >= n_tokens`
    /// gives a single block.
    pub fn unshifted(n_tokens: usize, block_size: usize) -> Result<Self> {
        Self::new(n_tokens, block_size.max(1), 0)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block_of(&self, i: usize) -> usize {
        (i + self.shift) / self.block_size
    }

    /// Per-token times from per-block times.
    pub fn expand_times(&self, t_vec: &[f32]) -> Vec<f32> {
        self.blocks
            .iter()
            .zip(t_vec)
            .flat_map(|(r, &t)| std::iter::repeat(t).take(r.len()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Text,
    Clean,
    Noisy,
    PrefixCtx,
    SuffixCtx,
}

impl SegmentKind {
    pub fn label(self) -> &'static str {
        match self {
            SegmentKind::Text => "text",
            SegmentKind::Clean => "clean",
            SegmentKind::Noisy => "noisy",
            SegmentKind::PrefixCtx => "prefix",
            SegmentKind::SuffixCtx => "suffix",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "text" => SegmentKind::Text,
            "clean" => SegmentKind::Clean,
            "noisy" => SegmentKind::Noisy,
            "prefix" => SegmentKind::PrefixCtx,
            "suffix" => SegmentKind::SuffixCtx,
            other => return Err(Error::Format(format!("unknown segment kind `{other}`"))),
        })
    }

    pub fn is_speech(self) -> bool {
        self != SegmentKind::Text
    }
}

/// One position of a layout: which token it holds and, for middle tokens,
/// which block that token belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub kind: SegmentKind,
    /// Symbol index for text, latent index for speech tokens.
    pub index: usize,
    pub block: Option<usize>,
}

/// Whether a query slot may attend a key slot.
pub fn permits(q: &Slot, k: &Slot) -> bool {
    use SegmentKind::*;
    let context = matches!(k.kind, Text | PrefixCtx | SuffixCtx);
    match q.kind {
        Text => k.kind == Text,
        PrefixCtx | SuffixCtx => context,
        Clean => context || (k.kind == Clean && k.block <= q.block),
        Noisy => {
            context
                || (k.kind == Clean && k.block < q.block)
                || (k.kind == Noisy && k.block == q.block)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlan {
    segments: Vec<(SegmentKind, usize)>,
    slots: Vec<Slot>,
    position: Vec<f64>,
    time_tag: Vec<f32>,
    permit: Vec<bool>,
    block_size: usize,
    shift: usize,
}

impl AttentionPlan {
    fn from_slots(
        slots: Vec<Slot>,
        times: Vec<f32>,
        positions: &PositionAssignment,
        block_size: usize,
        shift: usize,
    ) -> Self {
        let n = slots.len();
        let mut permit = vec![false; n * n];
        for (qi, q) in slots.iter().enumerate() {
            for (ki, k) in slots.iter().enumerate() {
                permit[qi * n + ki] = permits(q, k);
            }
        }
        let mut segments: Vec<(SegmentKind, usize)> = Vec::new();
        for s in &slots {
            match segments.last_mut() {
                Some((k, c)) if *k == s.kind => *c += 1,
                _ => segments.push((s.kind, 1)),
            }
        }
        let position = slots
            .iter()
            .map(|s| match s.kind {
                SegmentKind::Text => positions.text_position(s.index),
                _ => positions.speech_position(s.index),
            })
            .collect();
        Self {
            segments,
            slots,
            position,
            time_tag: times,
            permit,
            block_size,
            shift,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn segments(&self) -> &[(SegmentKind, usize)] {
        &self.segments
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn positions(&self) -> &[f64] {
        &self.position
    }

    pub fn time_tags(&self) -> &[f32] {
        &self.time_tag
    }

    pub fn block_ids(&self) -> Vec<Option<usize>> {
        self.slots.iter().map(|s| s.block).collect()
    }

    pub fn permit(&self, q: usize, k: usize) -> bool {
        self.permit[q * self.len() + k]
    }

    pub fn permit_matrix(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        (0..n).map(|q| self.permit[q * n..(q + 1) * n].to_vec()).collect()
    }

    /// Copy of the plan with every pair rejected by `keep` denied.
    pub fn masked(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let n = self.len();
        let mut out = self.clone();
        for q in 0..n {
            for k in 0..n {
                out.permit[q * n + k] &= keep(q, k);
            }
        }
        out
    }

    /// Slot indices holding segment kind `kind`, in layout order.
    pub fn indices_of(&self, kind: SegmentKind) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.slots[i].kind == kind).collect()
    }

    /// Attendable keys for each query in `queries`, restricted to key columns
    /// `0..n_keys`.
    pub fn key_lists(&self, queries: Range<usize>, n_keys: usize) -> Vec<Vec<u32>> {
        let n = self.len();
        queries
            .map(|q| {
                (0..n_keys.min(n))
                    .filter(|&k| self.permit[q * n + k])
                    .map(|k| k as u32)
                    .collect()
            })
            .collect()
    }

    /// Character-grid rendering: a header `n_text B S kind:count ...` followed
    /// by one row of `0`/`1` per query.
    pub fn render(&self) -> String {
        let n_text = self
            .segments
            .iter()
            .filter(|(k, _)| *k == SegmentKind::Text)
            .map(|(_, c)| c)
            .sum::<usize>();
        let mut out = format!("{n_text} {} {}", self.block_size, self.shift);
        for (k, c) in &self.segments {
            let _ = write!(out, " {}:{c}", k.label());
        }
        out.push('\n');
        let n = self.len();
        for q in 0..n {
            for k in 0..n {
                out.push(if self.permit[q * n + k] { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Parsed golden-mask file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskFile {
    pub n_text: usize,
    pub block_size: usize,
    pub shift: usize,
    pub segments: Vec<(SegmentKind, usize)>,
    pub rows: Vec<Vec<bool>>,
}

impl MaskFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty mask file".into()))?;
        let mut fields = header.split_whitespace();
        let mut num = |name: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format(format!("mask header: bad `{name}`")))
        };
        let (n_text, block_size, shift) = (num("n_text")?, num("B")?, num("S")?);
        let segments = header
            .split_whitespace()
            .skip(3)
            .map(|f| {
                let (k, c) = f
                    .split_once(':')
                    .ok_or_else(|| Error::Format(format!("mask header: bad segment `{f}`")))?;
                let c = c.parse().map_err(|_| Error::Format(format!("mask header: bad count `{c}`")))?;
                Ok((SegmentKind::parse(k)?, c))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = lines
            .map(|l| {
                l.trim()
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(Error::Format(format!("mask row: bad character `{other}`"))),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let n: usize = segments.iter().map(|(_, c)| c).sum();
        ensure!(rows.len() == n, Format, "mask has {} rows, header declares {n}", rows.len());
        ensure!(rows.iter().all(|r| r.len() == n), Format, "mask rows must have {n} columns");
        Ok(Self {
            n_text,
            block_size,
            shift,
            segments,
            rows,
        })
    }

    pub fn matches(&self, plan: &AttentionPlan) -> bool {
        self.segments == plan.segments && self.rows == plan.permit_matrix()
    }
}

fn check_times(t_vec: &[f32], n_blocks: usize) -> Result<()> {
    ensure!(
        t_vec.len() == n_blocks,
        Input,
        "{} block times for {n_blocks} blocks",
        t_vec.len()
    );
    for &t in t_vec {
        ensure!(t > 0.0 && t <= 1.0, Input, "noisy block time {t} outside (0, 1]");
    }
    Ok(())
}

fn text_slots(n_text: usize) -> impl Iterator<Item = Slot> {
    (0..n_text).map(|i| Slot {
        kind: SegmentKind::Text,
        index: i,
        block: None,
    })
}

const TEXT_TIME: f32 = -1.0;

/// Training layout `(C, Z, Z_t)` with one noisy copy of every token.
pub fn build_train_plan(n_text: usize, partition: &BlockPartition, t_vec: &[f32]) -> Result<AttentionPlan> {
    check_times(t_vec, partition.len())?;
    let n = partition.n_tokens();
    let positions = PositionAssignment::new(n_text, n)?;
    let mut slots: Vec<Slot> = text_slots(n_text).collect();
    let mut times = vec![TEXT_TIME; n_text];
    for i in 0..n {
        slots.push(Slot {
            kind: SegmentKind::Clean,
            index: i,
            block: Some(partition.block_of(i)),
        });
        times.push(0.0);
    }
    for (m, r) in partition.blocks().iter().enumerate() {
        for i in r.clone() {
            slots.push(Slot {
                kind: SegmentKind::Noisy,
                index: i,
                block: Some(m),
            });
            times.push(t_vec[m]);
        }
    }
    Ok(AttentionPlan::from_slots(slots, times, &positions, partition.block_size(), partition.shift()))
}

/// Inference layout `(C, Z^{<b_m}, Z_t^{b_m:e_m})` for generating block `block`
/// of `partition` at ODE time `t`.
pub fn build_infer_step_plan(n_text: usize, partition: &BlockPartition, block: usize, t: f32) -> Result<AttentionPlan> {
    ensure!(block < partition.len(), Input, "block {block} out of {}", partition.len());
    check_times(&[t], 1)?;
    let positions = PositionAssignment::new(n_text, partition.n_tokens())?;
    let range = partition.blocks()[block].clone();
    let mut slots: Vec<Slot> = text_slots(n_text).collect();
    let mut times = vec![TEXT_TIME; n_text];
    for i in 0..range.start {
        slots.push(Slot {
            kind: SegmentKind::Clean,
            index: i,
            block: Some(partition.block_of(i)),
        });
        times.push(0.0);
    }
    for i in range {
        slots.push(Slot {
            kind: SegmentKind::Noisy,
            index: i,
            block: Some(block),
        });
        times.push(t);
    }
    Ok(AttentionPlan::from_slots(slots, times, &positions, partition.block_size(), partition.shift()))
}

/// Layout `(C, Z^{<upto})` of finalized tokens only, used to extend a key/value
/// cache once a block is generated.
pub fn build_context_plan(n_text: usize, partition: &BlockPartition, upto: usize) -> Result<AttentionPlan> {
    ensure!(upto <= partition.n_tokens(), Input, "{upto} tokens exceed partition length");
    let positions = PositionAssignment::new(n_text, partition.n_tokens())?;
    let mut slots: Vec<Slot> = text_slots(n_text).collect();
    let mut times = vec![TEXT_TIME; n_text];
    for i in 0..upto {
        slots.push(Slot {
            kind: SegmentKind::Clean,
            index: i,
            block: Some(partition.block_of(i)),
        });
        times.push(0.0);
    }
    Ok(AttentionPlan::from_slots(slots, times, &positions, partition.block_size(), partition.shift()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FimSplit {
    n_left: usize,
    n_right: usize,
    total: usize,
}

impl FimSplit {
    pub fn new(n_left: usize, n_right: usize, total: usize) -> Result<Self> {
        ensure!(
            n_left < n_right && n_right <= total,
            Input,
            "invalid split: need 0 <= {n_left} < {n_right} <= {total}"
        );
        Ok(Self { n_left, n_right, total })
    }

    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn n_right(&self) -> usize {
        self.n_right
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn middle(&self) -> Range<usize> {
        self.n_left..self.n_right
    }

    pub fn middle_len(&self) -> usize {
        self.n_right - self.n_left
    }

    pub fn suffix_len(&self) -> usize {
        self.total - self.n_right
    }
}

/// Middle length uniform on `1..=n`, then the left edge uniform over every
/// position that fits.
pub fn sample_fim_split<R: Rng>(n_tokens: usize, rng: &mut R) -> Result<FimSplit> {
    ensure!(n_tokens >= 1, Input, "cannot split an empty sequence");
    let len = rng.gen_range(1..=n_tokens);
    let left = rng.gen_range(0..=n_tokens - len);
    FimSplit::new(left, left + len, n_tokens)
}

fn check_middle(split: &FimSplit, middle: &BlockPartition) -> Result<()> {
    ensure!(
        middle.n_tokens() == split.middle_len(),
        Input,
        "middle partition covers {} tokens, split middle has {}",
        middle.n_tokens(),
        split.middle_len()
    );
    Ok(())
}

fn speech_slot(split: &FimSplit, middle: &BlockPartition, i: usize) -> Slot {
    if i < split.n_left {
        Slot {
            kind: SegmentKind::PrefixCtx,
            index: i,
            block: None,
        }
    } else if i >= split.n_right {
        Slot {
            kind: SegmentKind::SuffixCtx,
            index: i,
            block: None,
        }
    } else {
        Slot {
            kind: SegmentKind::Clean,
            index: i,
            block: Some(middle.block_of(i - split.n_left)),
        }
    }
}

/// Fill-in-the-middle training layout `(C, Z, Z_t^{N_L:N_R})`; the sequence
/// keeps its natural order.
pub fn build_fim_train_plan(
    n_text: usize,
    split: &FimSplit,
    middle: &BlockPartition,
    t_vec: &[f32],
) -> Result<AttentionPlan> {
    check_middle(split, middle)?;
    check_times(t_vec, middle.len())?;
    let positions = PositionAssignment::new(n_text, split.total())?;
    let mut slots: Vec<Slot> = text_slots(n_text).collect();
    let mut times = vec![TEXT_TIME; n_text];
    for i in 0..split.total() {
        slots.push(speech_slot(split, middle, i));
        times.push(0.0);
    }
    for (m, r) in middle.blocks().iter().enumerate() {
        for i in r.clone() {
            slots.push(Slot {
                kind: SegmentKind::Noisy,
                index: split.n_left + i,
                block: Some(m),
            });
            times.push(t_vec[m]);
        }
    }
    Ok(AttentionPlan::from_slots(slots, times, &positions, middle.block_size(), middle.shift()))
}

/// Fill-in-the-middle inference layout
/// `(C, Z^{<N_L}, Z^{>=N_R}, Z^{N_L:b_m}, Z_t^{b_m:e_m})`: the suffix moves in
/// front of the generated middle so the cache only ever grows at the end.
/// With `t = None` the noisy block is omitted, leaving the cacheable prefix
/// up to (and including) block `block - 1`... or all of the context when
/// `block == 0`.
pub fn build_fim_infer_plan(
    n_text: usize,
    split: &FimSplit,
    middle: &BlockPartition,
    block: usize,
    t: Option<f32>,
) -> Result<AttentionPlan> {
    check_middle(split, middle)?;
    ensure!(block <= middle.len(), Input, "block {block} out of {}", middle.len());
    if let Some(t) = t {
        ensure!(block < middle.len(), Input, "block {block} out of {}", middle.len());
        check_times(&[t], 1)?;
    }
    let positions = PositionAssignment::new(n_text, split.total())?;
    let mut slots: Vec<Slot> = text_slots(n_text).collect();
    let mut times = vec![TEXT_TIME; n_text];
    let order = (0..split.n_left).chain(split.n_right..split.total());
    let done = middle.blocks().get(block).map_or(middle.n_tokens(), |r| r.start);
    for i in order.chain(split.n_left..split.n_left + done) {
        slots.push(speech_slot(split, middle, i));
        times.push(0.0);
    }
    if let Some(t) = t {
        for i in middle.blocks()[block].clone() {
            slots.push(Slot {
                kind: SegmentKind::Noisy,
                index: split.n_left + i,
                block: Some(block),
            });
            times.push(t);
        }
    }
    Ok(AttentionPlan::from_slots(slots, times, &positions, middle.block_size(), middle.shift()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ranges(p: &BlockPartition) -> Vec<(usize, usize)> {
        p.blocks().iter().map(|r| (r.start, r.end)).collect()
    }

    #[test]
    fn block_index_examples() {
        assert_eq!(block_index(0, 2, 1).unwrap(), 0);
        assert_eq!(block_index(1, 2, 1).unwrap(), 1);
        assert_eq!(block_index(5, 4, 0).unwrap(), 1);
        assert!(matches!(block_index(0, 2, 2), Err(Error::Input(_))));
    }

    #[test]
    fn partition_examples() {
        assert_eq!(ranges(&BlockPartition::new(4, 2, 0).unwrap()), vec![(0, 2), (2, 4)]);
        assert_eq!(ranges(&BlockPartition::new(5, 2, 1).unwrap()), vec![(0, 1), (1, 3), (3, 5)]);
        assert_eq!(ranges(&BlockPartition::new(3, 8, 0).unwrap()), vec![(0, 3)]);
        assert!(BlockPartition::new(0, 2, 0).is_err());
        assert!(BlockPartition::new(3, 2, 2).is_err());
    }

    #[test]
    fn partition_tiles_exhaustively() {
        for n in 1..=64 {
            for b in 1..=8 {
                for s in 0..b {
                    let p = BlockPartition::new(n, b, s).unwrap();
                    let flat: Vec<usize> = p.blocks().iter().flat_map(|r| r.clone()).collect();
                    assert_eq!(flat, (0..n).collect::<Vec<_>>());
                    let last = p.len() - 1;
                    for (m, r) in p.blocks().iter().enumerate() {
                        assert!(r.clone().all(|i| p.block_of(i) == m));
                        if m == 0 {
                            assert_eq!(r.len(), (b - s).min(n));
                        } else if m < last {
                            assert_eq!(r.len(), b);
                        } else {
                            assert!(r.len() <= b);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn train_plan_rule_examples() {
        let p = BlockPartition::new(4, 2, 0).unwrap();
        let plan = build_train_plan(2, &p, &[0.3, 0.9]).unwrap();
        let clean = |i: usize| 2 + i;
        let noisy = |i: usize| 6 + i;
        assert!(!plan.permit(noisy(0), clean(0)));
        assert!(!plan.permit(noisy(0), clean(1)));
        assert!(plan.permit(clean(3), clean(1)));
        assert!(plan.permit(clean(3), 0) && plan.permit(clean(3), 1));
        assert!(plan.permit(noisy(2), clean(1)));
        assert!(plan.permit(noisy(2), noisy(3)));
        assert!(!plan.permit(noisy(2), noisy(1)));
        assert_eq!(plan.time_tags(), &[-1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.3, 0.9, 0.9]);
        assert_eq!(plan.positions()[2..6], [0.0, 0.5, 1.0, 1.5]);
        assert_eq!(plan.positions()[6..10], [0.0, 0.5, 1.0, 1.5]);
    }

    #[test]
    fn train_plan_rejects_zero_time() {
        let p = BlockPartition::new(4, 2, 0).unwrap();
        assert!(matches!(build_train_plan(1, &p, &[0.0, 0.5]), Err(Error::Input(_))));
        assert!(build_train_plan(1, &p, &[0.5]).is_err());
    }

    #[test]
    fn noisy_clean_asymmetry_exhaustive() {
        for n in 1..=12 {
            for b in 1..=4 {
                for s in 0..b {
                    let p = BlockPartition::new(n, b, s).unwrap();
                    let t = vec![0.5; p.len()];
                    let plan = build_train_plan(2, &p, &t).unwrap();
                    for i in 0..n {
                        for j in 0..n {
                            if p.block_of(i) == p.block_of(j) {
                                assert!(!plan.permit(2 + n + i, 2 + j));
                                assert!(plan.permit(2 + i, 2 + j));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn infer_first_block_sees_only_text_and_itself() {
        let p = BlockPartition::new(6, 2, 0).unwrap();
        let plan = build_infer_step_plan(3, &p, 0, 1.0).unwrap();
        assert_eq!(plan.len(), 5);
        for q in 3..5 {
            for k in 0..5 {
                assert!(plan.permit(q, k));
            }
        }
    }

    #[test]
    fn infer_plans_are_cache_consistent() {
        let p = BlockPartition::new(7, 2, 1).unwrap();
        for m in 1..p.len() {
            let prev = build_infer_step_plan(2, &p, m - 1, 0.5).unwrap();
            let cur = build_infer_step_plan(2, &p, m, 0.5).unwrap();
            let ctx = build_context_plan(2, &p, p.blocks()[m].start).unwrap();
            let shared = 2 + p.blocks()[m - 1].start;
            for q in 0..shared {
                for k in 0..shared {
                    assert_eq!(prev.permit(q, k), cur.permit(q, k));
                }
            }
            for q in 0..ctx.len() {
                for k in 0..ctx.len() {
                    assert_eq!(ctx.permit(q, k), cur.permit(q, k));
                }
            }
        }
    }

    #[test]
    fn fim_rules() {
        let split = FimSplit::new(2, 4, 6).unwrap();
        let middle = BlockPartition::new(2, 1, 0).unwrap();
        let plan = build_fim_train_plan(1, &split, &middle, &[0.5, 0.7]).unwrap();
        // layout: text(1) prefix(2) clean(2) suffix(2) noisy(2)
        let (suffix0, clean0, noisy0) = (5, 3, 7);
        assert!(plan.permit(noisy0, suffix0));
        assert!(!plan.permit(suffix0, clean0));
        assert!(!plan.permit(suffix0, noisy0));
        assert!(plan.permit(suffix0, 1));
        assert!(plan.permit(1, suffix0));
        assert!(!plan.permit(0, 1));
    }

    #[test]
    fn fim_degenerate_matches_plain_plans() {
        for n in 1..=9 {
            for b in 1..=3 {
                for s in 0..b {
                    let split = FimSplit::new(0, n, n).unwrap();
                    let p = BlockPartition::new(n, b, s).unwrap();
                    let t: Vec<f32> = (0..p.len()).map(|m| 0.1 + 0.1 * m as f32).collect();
                    let a = build_fim_train_plan(2, &split, &p, &t).unwrap();
                    let b_plan = build_train_plan(2, &p, &t).unwrap();
                    assert_eq!(a, b_plan);
                    for m in 0..p.len() {
                        let fi = build_fim_infer_plan(2, &split, &p, m, Some(0.4)).unwrap();
                        let pi = build_infer_step_plan(2, &p, m, 0.4).unwrap();
                        assert_eq!(fi, pi);
                    }
                }
            }
        }
    }

    #[test]
    fn fim_infer_positions_follow_token_identity() {
        let split = FimSplit::new(1, 3, 5).unwrap();
        let middle = BlockPartition::new(2, 1, 0).unwrap();
        let plan = build_fim_infer_plan(5, &split, &middle, 1, Some(0.5)).unwrap();
        let kinds: Vec<_> = plan.segments().to_vec();
        assert_eq!(
            kinds,
            vec![
                (SegmentKind::Text, 5),
                (SegmentKind::PrefixCtx, 1),
                (SegmentKind::SuffixCtx, 2),
                (SegmentKind::Clean, 1),
                (SegmentKind::Noisy, 1)
            ]
        );
        // eta = 1: suffix tokens 3 and 4 keep their true positions.
        assert_eq!(plan.positions()[6..8], [3.0, 4.0]);
        assert_eq!(plan.positions()[8], 1.0);
        assert_eq!(plan.positions()[9], 2.0);
    }

    #[test]
    fn fim_split_validation() {
        assert!(FimSplit::new(2, 2, 4).is_err());
        assert!(FimSplit::new(0, 5, 4).is_err());
        let split = FimSplit::new(1, 3, 4).unwrap();
        let wrong = BlockPartition::new(3, 1, 0).unwrap();
        assert!(build_fim_train_plan(1, &split, &wrong, &[0.5; 3]).is_err());
    }

    #[test]
    fn fim_split_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_fim_split(1, &mut rng).unwrap(), FimSplit::new(0, 1, 1).unwrap());
        }
    }

    fn chi_square_ok(counts: &[usize], n: usize) -> bool {
        let k = counts.len() as f64;
        let expect = n as f64 / k;
        let p = 1.0 / k;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        counts.iter().all(|&c| (c as f64 - expect).abs() <= 3.0 * sigma)
    }

    #[test]
    fn fim_split_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 8;
        let draws = 100_000;
        let mut len_counts = vec![0usize; n];
        let mut left_counts = vec![vec![0usize; n]; n + 1];
        for _ in 0..draws {
            let s = sample_fim_split(n, &mut rng).unwrap();
            len_counts[s.middle_len() - 1] += 1;
            left_counts[s.middle_len()][s.n_left()] += 1;
        }
        assert!(chi_square_ok(&len_counts, draws), "{len_counts:?}");
        for len in 1..=n {
            let support = &left_counts[len][..=n - len];
            let total: usize = support.iter().sum();
            assert!(chi_square_ok(support, total), "len {len}: {support:?}");
        }
    }

    #[test]
    fn render_parse_round_trip() {
        let p = BlockPartition::new(3, 2, 1).unwrap();
        let plan = build_train_plan(1, &p, &[0.5, 0.5]).unwrap();
        let text = plan.render();
        assert!(text.starts_with("1 2 1 text:1 clean:3 noisy:3\n"));
        let parsed = MaskFile::parse(&text).unwrap();
        assert!(parsed.matches(&plan));
        assert!(MaskFile::parse("1 1 0 text:1\n2\n").is_err());
        assert!(MaskFile::parse("1 1 0 text:2\n11\n").is_err());
    }
}

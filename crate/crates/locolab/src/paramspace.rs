//! Flat parameter vectors with a named block structure, and partitioning of
//! those blocks into synchronization fragments.
//!
//! A [`ParamVector`] stores every parameter of a model in one flat `f64`
//! buffer, described by an ordered list of named blocks. A [`FragmentSpec`]
//! groups the *synchronizable* blocks (the residual blocks of the model) into
//! `P` fragments of `fragment_size` blocks each, either sequentially or
//! strided, and assigns each fragment a step offset `t_p` that staggers its
//! synchronization within a period of `H` steps.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockInfo {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Flat parameter storage with named block ranges.
///
/// Block ranges are disjoint, contiguous, and cover the data exactly; the
/// block order is fixed at construction and identical across replicas.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    blocks: Vec<BlockInfo>,
}

impl ParamVector {
    /// Build a zero-initialized vector from `(name, len)` block descriptors.
    pub fn zeros(layout: &[(String, usize)]) -> Self {
        let mut blocks = Vec::with_capacity(layout.len());
        let mut start = 0;
        for (name, len) in layout {
            blocks.push(BlockInfo {
                name: name.clone(),
                start,
                len: *len,
            });
            start += len;
        }
        ParamVector {
            data: vec![0.0; start],
            blocks,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn block_named(&self, name: &str) -> Option<&BlockInfo> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// View of one block's slice.
    pub fn block_slice(&self, idx: usize) -> &[f64] {
        let b = &self.blocks[idx];
        &self.data[b.start..b.start + b.len]
    }

    /// Checks the block invariants (disjoint, contiguous, exact cover).
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for b in &self.blocks {
            if b.start != cursor {
                return Err(Error::structural(format!(
                    "block `{}` starts at {} but previous blocks end at {}",
                    b.name, b.start, cursor
                )));
            }
            cursor += b.len;
        }
        if cursor != self.data.len() {
            return Err(Error::structural(format!(
                "blocks cover {} values but data holds {}",
                cursor,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Fragment pattern over block indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentPattern {
    /// Fragment `p` holds consecutive blocks `p*|p| .. (p+1)*|p|-1`.
    Sequential,
    /// Fragment `p` holds interleaved blocks `p, p+P, p+2P, ...`.
    Strided,
}

/// Partition of `num_blocks` synchronizable blocks into fragments, plus the
/// per-fragment step offsets once assigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FragmentSpec {
    pub num_blocks: usize,
    pub fragment_size: usize,
    pub pattern: FragmentPattern,
    /// Block indices per fragment.
    pub fragments: Vec<Vec<usize>>,
    /// Step offsets `t_p`, strictly increasing in `p`; `None` until assigned.
    pub offsets: Option<Vec<u64>>,
}

impl FragmentSpec {
    pub fn num_fragments(&self) -> usize {
        self.fragments.len()
    }

    pub fn offsets(&self) -> Result<&[u64]> {
        self.offsets
            .as_deref()
            .ok_or_else(|| Error::structural("fragment offsets not assigned"))
    }
}

/// Partition `num_blocks` blocks into fragments of `fragment_size` blocks.
pub fn partition(
    num_blocks: usize,
    fragment_size: usize,
    pattern: FragmentPattern,
) -> Result<FragmentSpec> {
    if num_blocks == 0 || fragment_size == 0 {
        return Err(Error::config(format!(
            "num_blocks ({num_blocks}) and fragment_size ({fragment_size}) must both be >= 1"
        )));
    }
    if num_blocks % fragment_size != 0 {
        return Err(Error::config(format!(
            "fragment_size {fragment_size} does not divide num_blocks {num_blocks}"
        )));
    }
    let p = num_blocks / fragment_size;
    let fragments = match pattern {
        FragmentPattern::Sequential => (0..p)
            .map(|f| (f * fragment_size..(f + 1) * fragment_size).collect())
            .collect(),
        FragmentPattern::Strided => (0..p)
            .map(|f| (0..fragment_size).map(|k| f + k * p).collect())
            .collect(),
    };
    Ok(FragmentSpec {
        num_blocks,
        fragment_size,
        pattern,
        fragments,
        offsets: None,
    })
}

/// Assign evenly spaced offsets `t_p = floor(p * H / P)`.
///
/// Fragment `p`'s first send is the smallest step `t >= H` with
/// `(t - t_p) % H == 0`, i.e. `H + t_p` when `t_p > 0` and `H` otherwise, so
/// every fragment accumulates a full window of `H` inner steps before its
/// first delta.
pub fn assign_offsets(spec: &FragmentSpec, sync_period: u64) -> Result<FragmentSpec> {
    let p = spec.num_fragments() as u64;
    if sync_period < 1 {
        return Err(Error::config("sync period H must be >= 1"));
    }
    if sync_period < p {
        return Err(Error::config(format!(
            "sync period H={sync_period} is smaller than the fragment count P={p}; \
             every fragment needs a distinct offset slot"
        )));
    }
    let offsets = (0..p).map(|f| f * sync_period / p).collect();
    Ok(FragmentSpec {
        offsets: Some(offsets),
        ..spec.clone()
    })
}

/// A half-open index range into the flat parameter buffer.
pub type IndexRange = std::ops::Range<usize>;

/// The flat index ranges owned by each fragment of a concrete model.
///
/// Fragments are defined over the synchronizable blocks; any remaining blocks
/// (input projection, output head) are split across fragments in equal
/// contiguous chunks so that every fragment owns exactly `total / P`
/// parameters whenever `P` divides the leftover count. Equal fragment sizes
/// are what make the peak-bandwidth reduction of streaming synchronization an
/// exact `L / |p|` at the byte counter.
#[derive(Debug, Clone)]
pub struct FragmentLayout {
    /// Sorted, non-overlapping ranges per fragment.
    ranges: Vec<Vec<IndexRange>>,
    lens: Vec<usize>,
}

impl FragmentLayout {
    /// Bind a fragment spec to a parameter vector.
    ///
    /// `sync_blocks` gives the positions (in `params.blocks()` order) of the
    /// blocks the spec partitions; it must have exactly `spec.num_blocks`
    /// entries. All other blocks are the leftover that gets chunked evenly.
    pub fn build(
        params: &ParamVector,
        spec: &FragmentSpec,
        sync_blocks: &[usize],
    ) -> Result<FragmentLayout> {
        if sync_blocks.len() != spec.num_blocks {
            return Err(Error::structural(format!(
                "spec partitions {} blocks but {} sync blocks were given",
                spec.num_blocks,
                sync_blocks.len()
            )));
        }
        let nf = spec.num_fragments();
        let mut ranges: Vec<Vec<IndexRange>> = vec![Vec::new(); nf];
        for (f, frag) in spec.fragments.iter().enumerate() {
            for &b in frag {
                let info = &params.blocks()[sync_blocks[b]];
                ranges[f].push(info.start..info.start + info.len);
            }
        }

        // Leftover blocks, concatenated in vector order, then chunked evenly.
        let is_sync = |i: usize| sync_blocks.contains(&i);
        let leftover: Vec<IndexRange> = params
            .blocks()
            .iter()
            .enumerate()
            .filter(|(i, _)| !is_sync(*i))
            .map(|(_, b)| b.start..b.start + b.len)
            .collect();
        let leftover_total: usize = leftover.iter().map(|r| r.len()).sum();
        let base = leftover_total / nf;
        let rem = leftover_total % nf;
        let mut iter = leftover.into_iter();
        let mut cur = iter.next();
        for (f, out) in ranges.iter_mut().enumerate() {
            // First `rem` fragments absorb one extra value each.
            let mut want = base + usize::from(f < rem);
            while want > 0 {
                let r = cur.as_mut().expect("leftover chunking exhausted early");
                let take = want.min(r.len());
                out.push(r.start..r.start + take);
                r.start += take;
                want -= take;
                if r.start >= r.end {
                    cur = iter.next();
                }
            }
        }

        for out in &mut ranges {
            out.sort_by_key(|r| r.start);
        }
        let lens = ranges
            .iter()
            .map(|rs| rs.iter().map(|r| r.len()).sum())
            .collect();
        Ok(FragmentLayout { ranges, lens })
    }

    pub fn num_fragments(&self) -> usize {
        self.ranges.len()
    }

    /// Parameter count of fragment `f`.
    pub fn len(&self, f: usize) -> usize {
        self.lens[f]
    }

    pub fn ranges(&self, f: usize) -> &[IndexRange] {
        &self.ranges[f]
    }

    /// Copy fragment `f` out of `data` into a dense buffer (ascending index).
    pub fn gather(&self, data: &[f64], f: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lens[f]);
        for r in &self.ranges[f] {
            out.extend_from_slice(&data[r.clone()]);
        }
        out
    }

    /// Write a dense fragment buffer back into `data`.
    pub fn scatter(&self, data: &mut [f64], f: usize, frag: &[f64]) {
        debug_assert_eq!(frag.len(), self.lens[f]);
        let mut off = 0;
        for r in &self.ranges[f] {
            data[r.clone()].copy_from_slice(&frag[off..off + r.len()]);
            off += r.len();
        }
    }

    /// Boolean mask over the full vector marking fragment `f`'s indices.
    pub fn mask(&self, total_len: usize, f: usize) -> Vec<bool> {
        let mut m = vec![false; total_len];
        for r in &self.ranges[f] {
            for v in &mut m[r.clone()] {
                *v = true;
            }
        }
        m
    }
}

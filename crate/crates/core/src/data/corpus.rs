use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relation between an ordered event pair `(A, B)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Relation {
    /// A is enabled by B.
    EnabledBy = 0,
    /// A is a reaction to B.
    ReactionTo = 1,
    /// A causes B.
    Causes = 2,
    /// A is unrelated to B.
    Unrelated = 3,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::EnabledBy,
        Relation::ReactionTo,
        Relation::Causes,
        Relation::Unrelated,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::EnabledBy => "enabled_by",
            Relation::ReactionTo => "reaction_to",
            Relation::Causes => "causes",
            Relation::Unrelated => "unrelated",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    /// `T x d_in` raw clip features.
    pub clip: Tensor<f32>,
    pub verb: u32,
    pub scene: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    pub movie_id: u32,
    /// Spacing between consecutive events, in seconds.
    pub stride_s: u32,
    pub events: Vec<Event>,
}

/// Indices are global event indices: events are numbered consecutively
/// across movies in corpus order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RelationTriplet {
    pub a_idx: u32,
    pub b_idx: u32,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub d_in: usize,
    pub window: usize,
    pub stride_s: u32,
    pub sequences: Vec<EventSequence>,
    pub triplets: Vec<RelationTriplet>,
}

impl Corpus {
    pub fn n_events(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }

    /// Global index of the first event of each movie.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sequences
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.events.len();
                o
            })
            .collect()
    }

    /// `(movie position, event position)` of a global index.
    pub fn locate(&self, idx: usize) -> Option<(usize, usize)> {
        let mut rem = idx;
        for (m, s) in self.sequences.iter().enumerate() {
            if rem < s.events.len() {
                return Some((m, rem));
            }
            rem -= s.events.len();
        }
        None
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.sequences.iter().flat_map(|s| s.events.iter())
    }

    pub fn verbs(&self) -> Vec<usize> {
        self.events().map(|e| e.verb as usize).collect()
    }

    /// All clips stacked as `(n_events * T) x d_in`.
    pub fn stacked_clips(&self) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.n_events() * self.window * self.d_in);
        for e in self.events() {
            data.extend_from_slice(e.clip.data());
        }
        Tensor::new(vec![self.n_events() * self.window, self.d_in], data).expect("non-empty corpus")
    }

    /// Every `(movie, start)` with a full window of `n` events.
    pub fn windows(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (m, s) in self.sequences.iter().enumerate() {
            if s.events.len() >= n {
                out.extend((0..=s.events.len() - n).map(|start| (m, start)));
            }
        }
        out
    }

    /// Keeps every `factor`-th event of each movie and remaps triplets;
    /// triplets touching a dropped event are discarded.
    pub fn restride(&self, factor: usize, min_len: usize) -> Result<Corpus> {
        let offsets = self.offsets();
        let mut remap = vec![None; self.n_events()];
        let mut sequences = Vec::with_capacity(self.sequences.len());
        let mut next = 0u32;
        for (m, seq) in self.sequences.iter().enumerate() {
            let s = restride(seq, factor, min_len)?;
            for k in (0..seq.events.len()).step_by(factor) {
                remap[offsets[m] + k] = Some(next);
                next += 1;
            }
            sequences.push(s);
        }
        let triplets = self
            .triplets
            .iter()
            .filter_map(|t| {
                Some(RelationTriplet {
                    a_idx: remap[t.a_idx as usize]?,
                    b_idx: remap[t.b_idx as usize]?,
                    relation: t.relation,
                })
            })
            .collect();
        Ok(Corpus {
            d_in: self.d_in,
            window: self.window,
            stride_s: self.stride_s * factor as u32,
            sequences,
            triplets,
        })
    }
}

/// Keeps events `0, factor, 2*factor, ...`.
pub fn restride(seq: &EventSequence, factor: usize, min_len: usize) -> Result<EventSequence> {
    if factor == 0 {
        return Err(Error::InvalidArgument("restride factor must be >= 1".into()));
    }
    let events: Vec<Event> = seq.events.iter().step_by(factor).cloned().collect();
    if events.len() < min_len {
        return Err(Error::InvalidArgument(format!(
            "restride by {factor} leaves {} events, fewer than the window length {min_len}",
            events.len()
        )));
    }
    Ok(EventSequence {
        movie_id: seq.movie_id,
        stride_s: seq.stride_s * factor as u32,
        events,
    })
}

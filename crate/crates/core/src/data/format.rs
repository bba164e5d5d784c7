//! `EVSQ` feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "EVSQ"
//! version      u16      1
//! d_in         u32
//! T            u32
//! n_movies     u32
//! counts       u32 x n_movies      events per movie
//! stride_s     u32
//! payload      f32 x (events * T * d_in), row-major in event order
//! verbs        u32 x events
//! scenes       u32 x events
//! n_triplets   u32
//! triplets     (a_idx u32, b_idx u32, relation u8) x n_triplets
//! ```
//!
//! Movie ids are positional: the i-th movie in the file has id `i`.

use std::fs;
use std::path::Path;

use crate::data::corpus::{Corpus, Event, EventSequence, Relation, RelationTriplet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EVSQ";
pub const VERSION: u16 = 1;

pub fn encode_features(corpus: &Corpus) -> Result<Vec<u8>> {
    if let Some(s) = corpus.sequences.iter().find(|s| s.stride_s != corpus.stride_s) {
        return Err(Error::InvalidArgument(format!(
            "movie {} has stride {} but the corpus stride is {}",
            s.movie_id, s.stride_s, corpus.stride_s
        )));
    }
    let n = corpus.n_events();
    let mut out = Vec::with_capacity(32 + n * (corpus.window * corpus.d_in * 4 + 8));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [corpus.d_in, corpus.window, corpus.sequences.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &corpus.sequences {
        out.extend_from_slice(&(s.events.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(&corpus.stride_s.to_le_bytes());
    for e in corpus.events() {
        if e.clip.rows() != corpus.window || e.clip.cols() != corpus.d_in {
            return Err(Error::shape("write_features", e.clip.shape(), &[corpus.window, corpus.d_in]));
        }
        for &x in e.clip.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for e in corpus.events() {
        out.extend_from_slice(&e.verb.to_le_bytes());
    }
    for e in corpus.events() {
        out.extend_from_slice(&e.scene.to_le_bytes());
    }
    out.extend_from_slice(&(corpus.triplets.len() as u32).to_le_bytes());
    for t in &corpus.triplets {
        out.extend_from_slice(&t.a_idx.to_le_bytes());
        out.extend_from_slice(&t.b_idx.to_le_bytes());
        out.push(t.relation as u8);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let d_in = r.u32("d_in")? as usize;
    let window = r.u32("T")? as usize;
    let n_movies = r.u32("n_movies")? as usize;
    if d_in == 0 || window == 0 {
        return Err(Error::DimensionDisagreement(format!("d_in={d_in}, T={window}")));
    }
    let mut counts = Vec::with_capacity(n_movies.min(1 << 20));
    for _ in 0..n_movies {
        counts.push(r.u32("event counts")? as usize);
    }
    let stride_s = r.u32("stride")?;
    let n_events: usize = counts.iter().sum();
    let per_clip = window * d_in;
    let payload = r.take(
        n_events
            .checked_mul(per_clip * 4)
            .ok_or_else(|| Error::DimensionDisagreement("payload size overflows".into()))?,
        "payload",
    )?;
    let mut clips = payload
        .chunks_exact(per_clip * 4)
        .map(|c| {
            let data = c
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(vec![window, d_in], data)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut verbs = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        verbs.push(r.u32("verb labels")?);
    }
    let mut scenes = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        scenes.push(r.u32("scene labels")?);
    }
    let n_triplets = r.u32("triplet count")? as usize;
    let mut triplets = Vec::with_capacity(n_triplets.min(1 << 20));
    for _ in 0..n_triplets {
        let a_idx = r.u32("triplet")?;
        let b_idx = r.u32("triplet")?;
        let code = r.take(1, "triplet")?[0];
        let relation = Relation::from_index(code as usize)
            .ok_or_else(|| Error::DimensionDisagreement(format!("relation code {code}")))?;
        if a_idx as usize >= n_events || b_idx as usize >= n_events || a_idx == b_idx {
            return Err(Error::DimensionDisagreement(format!(
                "triplet ({a_idx}, {b_idx}) invalid for {n_events} events"
            )));
        }
        triplets.push(RelationTriplet { a_idx, b_idx, relation });
    }
    if r.pos != bytes.len() {
        return Err(Error::DimensionDisagreement(format!(
            "{} trailing bytes after the triplet block",
            bytes.len() - r.pos
        )));
    }
    let mut label = 0;
    let sequences = counts
        .iter()
        .enumerate()
        .map(|(m, &c)| EventSequence {
            movie_id: m as u32,
            stride_s,
            events: (0..c)
                .map(|_| {
                    let e = Event {
                        clip: clips.next().expect("counted clips"),
                        verb: verbs[label],
                        scene: scenes[label],
                    };
                    label += 1;
                    e
                })
                .collect(),
        })
        .collect();
    Ok(Corpus {
        d_in,
        window,
        stride_s,
        sequences,
        triplets,
    })
}

pub fn write_features(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(corpus)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Corpus> {
    decode_features(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::narrative::{generate_corpus, NarrativeConfig};

    fn small() -> Corpus {
        let cfg = NarrativeConfig {
            n_movies: 4,
            seq_len: 6,
            ..Default::default()
        };
        generate_corpus(&cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small();
        let bytes = encode_features(&c).unwrap();
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_features(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_features(&small()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_features(&small()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_features(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_and_oversized() {
        let bytes = encode_features(&small()).unwrap();
        assert!(matches!(decode_features(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(decode_features(&bytes[..3]), Err(Error::Truncated(_))));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_features(&longer), Err(Error::DimensionDisagreement(_))));
    }

    #[test]
    fn header_dimension_larger_than_payload() {
        let mut bytes = encode_features(&small()).unwrap();
        // d_in lives at offset 6
        bytes[6..10].copy_from_slice(&64u32.to_le_bytes());
        let err = decode_features(&bytes).unwrap_err();
        assert!(matches!(err, Error::Truncated(_) | Error::DimensionDisagreement(_)), "{err}");
    }
}

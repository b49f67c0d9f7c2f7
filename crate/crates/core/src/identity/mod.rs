//! Speaker-identity space: the defense extractor, the held-out ASV
//! evaluator, class centroids and enrollment.

mod encoder;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{cosine, normalize_rows, Encoder, EncoderConfig, EncoderKind, IdentityEmbedding, CHECKPOINT_KIND};
pub use train::{train_extractors, EncoderReport, EncoderTrainConfig, ExtractorReport};

use crate::audio::corpus::{Gender, Utterance};
use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Mean embedding of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderCentroid {
    pub vector: Vec<f32>,
    pub class: Gender,
    pub support_count: usize,
    pub source: EncoderKind,
}

impl GenderCentroid {
    pub fn embedding(&self) -> IdentityEmbedding {
        IdentityEmbedding {
            vector: self.vector.clone(),
            source: self.source,
        }
    }
}

/// Arithmetic mean of at least two embeddings of one class from one encoder.
pub fn centroid(members: &[(Gender, &IdentityEmbedding)]) -> Result<GenderCentroid> {
    let Some(&(class, first)) = members.first() else {
        return Err(Error::invalid("centroid of an empty set"));
    };
    if members.len() < 2 {
        return Err(Error::invalid("centroid needs at least 2 members"));
    }
    let dim = first.vector.len();
    let mut sum = vec![0.0f64; dim];
    for (g, e) in members {
        if *g != class {
            return Err(Error::invalid(format!("centroid mixes classes {class} and {g}")));
        }
        if e.source != first.source {
            return Err(Error::invalid("centroid mixes embeddings of different encoders"));
        }
        if e.vector.len() != dim {
            return Err(Error::ShapeMismatch(format!("{} vs {dim} dims", e.vector.len())));
        }
        for (s, &v) in sum.iter_mut().zip(&e.vector) {
            *s += v as f64;
        }
    }
    let n = members.len() as f64;
    Ok(GenderCentroid {
        vector: sum.iter().map(|s| (s / n) as f32).collect(),
        class,
        support_count: members.len(),
        source: first.source,
    })
}

/// Draws a speaker of the opposite class and returns its id with the
/// centroid of all its utterances under `encoder`.
pub fn opposite_gender_centroid<R: Rng + ?Sized>(
    encoder: &Encoder,
    corpus: &[Utterance],
    class: Gender,
    rng: &mut R,
) -> Result<(String, GenderCentroid)> {
    let mut speakers: Vec<&str> = corpus
        .iter()
        .filter(|u| u.gender == class.opposite())
        .map(|u| u.speaker_id.as_str())
        .collect();
    speakers.sort_unstable();
    speakers.dedup();
    let &chosen = speakers
        .choose(rng)
        .ok_or_else(|| Error::invalid(format!("no speaker of class {} in corpus", class.opposite())))?;
    let embeddings: Vec<IdentityEmbedding> = corpus
        .iter()
        .filter(|u| u.speaker_id == chosen)
        .map(|u| encoder.embed(&u.waveform))
        .collect::<Result<_>>()?;
    let members: Vec<(Gender, &IdentityEmbedding)> = embeddings.iter().map(|e| (class.opposite(), e)).collect();
    Ok((chosen.to_string(), centroid(&members)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsvDecision {
    pub score: f64,
    pub accepted: bool,
}

/// Verification decision for an embedding against an enrollment.
pub fn asv_decide(embedding: &IdentityEmbedding, enrollment: &Enrollment, tau: f64) -> Result<AsvDecision> {
    let score = cosine(&embedding.vector, &enrollment.embedding)?;
    Ok(AsvDecision {
        score,
        accepted: score >= tau,
    })
}

/// Embeds `y` with the ASV evaluator and verifies it against `enrollment`.
pub fn asv_accept(asv: &Encoder, y: &Waveform, enrollment: &Enrollment, tau: f64) -> Result<AsvDecision> {
    if asv.kind() != EncoderKind::AsvEvaluator {
        return Err(Error::invalid("verification requires the ASV evaluator"));
    }
    asv_decide(&asv.embed(y)?, enrollment, tau)
}

/// Averaged ASV embedding of a speaker's clean utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enrollment {
    pub speaker_id: String,
    pub embedding: Vec<f32>,
    pub n_utterances: usize,
}

impl Enrollment {
    pub fn enroll(asv: &Encoder, speaker_id: &str, utterances: &[&Waveform]) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::invalid(format!("no utterances to enroll {speaker_id}")));
        }
        let mut sum: Vec<f64> = Vec::new();
        for w in utterances {
            let e = asv.embed(w)?;
            sum.resize(e.vector.len(), 0.0);
            for (s, v) in sum.iter_mut().zip(&e.vector) {
                *s += *v as f64;
            }
        }
        let n = utterances.len() as f64;
        Ok(Self {
            speaker_id: speaker_id.to_string(),
            embedding: sum.iter().map(|s| (s / n) as f32).collect(),
            n_utterances: utterances.len(),
        })
    }
}

/// Enrollments keyed by speaker, stored as one JSON file per speaker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnrollmentStore {
    pub speakers: BTreeMap<String, Enrollment>,
}

impl EnrollmentStore {
    /// Enrolls every speaker in `corpus` from all of its utterances.
    pub fn from_corpus(asv: &Encoder, corpus: &[Utterance]) -> Result<Self> {
        let mut grouped: BTreeMap<&str, Vec<&Waveform>> = BTreeMap::new();
        for u in corpus {
            grouped.entry(u.speaker_id.as_str()).or_default().push(&u.waveform);
        }
        let speakers = grouped
            .into_iter()
            .map(|(id, ws)| Ok((id.to_string(), Enrollment::enroll(asv, id, &ws)?)))
            .collect::<Result<_>>()?;
        Ok(Self { speakers })
    }

    pub fn get(&self, speaker_id: &str) -> Result<&Enrollment> {
        self.speakers
            .get(speaker_id)
            .ok_or_else(|| Error::invalid(format!("speaker {speaker_id} is not enrolled")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, e) in &self.speakers {
            let path = dir.join(format!("{id}.json"));
            fs::write(&path, serde_json::to_vec_pretty(e)?).map_err(|err| Error::io(&path, err))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut speakers = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let e: Enrollment = serde_json::from_slice(&bytes)?;
                speakers.insert(e.speaker_id.clone(), e);
            }
        }
        Ok(Self { speakers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn emb(v: &[f32]) -> IdentityEmbedding {
        IdentityEmbedding {
            vector: v.to_vec(),
            source: EncoderKind::DefenseExtractor,
        }
    }

    #[test]
    fn centroid_of_identical_vectors_is_that_vector() {
        let v = emb(&[0.3, -1.2, 2.0]);
        let c = centroid(&[(Gender::B, &v), (Gender::B, &v)]).unwrap();
        assert_eq!(c.vector, v.vector);
        assert_eq!(c.support_count, 2);
    }

    #[test]
    fn centroid_of_unit_axes() {
        let (a, b) = (emb(&[1.0, 0.0]), emb(&[0.0, 1.0]));
        let c = centroid(&[(Gender::A, &a), (Gender::A, &b)]).unwrap();
        assert_eq!(c.vector, vec![0.5, 0.5]);
    }

    #[test]
    fn centroid_rejects_empty_mixed_and_single() {
        let (a, b) = (emb(&[1.0, 0.0]), emb(&[0.0, 1.0]));
        assert!(centroid(&[]).is_err());
        assert!(centroid(&[(Gender::A, &a)]).is_err());
        assert!(centroid(&[(Gender::A, &a), (Gender::B, &b)]).is_err());
        let other = IdentityEmbedding {
            source: EncoderKind::AsvEvaluator,
            ..b.clone()
        };
        assert!(centroid(&[(Gender::A, &a), (Gender::A, &other)]).is_err());
    }

    fn enrollment(v: &[f32]) -> Enrollment {
        Enrollment {
            speaker_id: "s".into(),
            embedding: v.to_vec(),
            n_utterances: 1,
        }
    }

    #[test]
    fn enrollment_against_itself_scores_one() {
        let v = [0.2, 0.5, -0.1];
        let d = asv_decide(&emb(&v), &enrollment(&v), 0.25).unwrap();
        assert_relative_eq!(d.score, 1.0, epsilon = 1e-12);
        assert!(d.accepted);
        assert!(!asv_decide(&emb(&v), &enrollment(&v), 1.1).unwrap().accepted);
    }

    #[test]
    fn zero_embedding_is_an_error() {
        assert!(asv_decide(&emb(&[0.0, 0.0]), &enrollment(&[1.0, 0.0]), 0.25).is_err());
    }

    #[test]
    fn enrollment_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EnrollmentStore::default();
        for id in ["spkA00", "spkB01"] {
            store.speakers.insert(
                id.into(),
                Enrollment {
                    speaker_id: id.into(),
                    embedding: vec![0.1, 0.25, -3.0],
                    n_utterances: 4,
                },
            );
        }
        store.save(dir.path()).unwrap();
        assert!(dir.path().join("spkA00.json").exists());
        assert_eq!(EnrollmentStore::load(dir.path()).unwrap(), store);
        assert!(store.get("nobody").is_err());
    }

    fn vecs(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-3.0f32..3.0, dim), n)
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(v in prop::collection::vec(-3.0f32..3.0, 8), u in prop::collection::vec(-3.0f32..3.0, 8), c in 0.01f32..100.0) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && u.iter().any(|x| x.abs() > 1e-3));
            let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
            prop_assert!((cosine(&v, &scaled).unwrap() - 1.0).abs() < 1e-5);
            let a = asv_decide(&emb(&u), &enrollment(&v), 0.25).unwrap();
            let b = asv_decide(&emb(&u.iter().map(|x| x * c).collect::<Vec<_>>()), &enrollment(&scaled), 0.25).unwrap();
            prop_assert!((a.score - b.score).abs() < 1e-5);
            if (a.score - 0.25).abs() > 1e-5 {
                prop_assert_eq!(a.accepted, b.accepted);
            }
        }

        #[test]
        fn centroid_minimises_squared_distance(members in vecs(5, 3), probe in prop::collection::vec(-0.5f64..0.5, 3)) {
            let embs: Vec<IdentityEmbedding> = members.iter().map(|v| emb(v)).collect();
            let labelled: Vec<(Gender, &IdentityEmbedding)> = embs.iter().map(|e| (Gender::A, e)).collect();
            let c = centroid(&labelled).unwrap();
            let cost = |p: &[f64]| -> f64 {
                members.iter().map(|m| m.iter().zip(p).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>()).sum()
            };
            let at_c: Vec<f64> = c.vector.iter().map(|&v| v as f64).collect();
            let moved: Vec<f64> = at_c.iter().zip(&probe).map(|(a, d)| a + d).collect();
            prop_assert!(cost(&at_c) <= cost(&moved) + 1e-6);
            // analytic optimum: the gradient of the cost vanishes at the mean
            for d in 0..3 {
                let g: f64 = members.iter().map(|m| at_c[d] - m[d] as f64).sum();
                prop_assert!(g.abs() < 1e-4);
            }
        }
    }
}

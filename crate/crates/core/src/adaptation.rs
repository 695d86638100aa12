//! Momentum online adaptation.
//!
//! A Siamese copy of the cost model seeds every round's target model; after
//! the target is fine-tuned on the round's measurements the Siamese weights
//! move toward it by an exponential moving average in parameter space.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::model::{model_from_json, model_to_json, train, PaCMParams, RankGroup, TrainConfig, TrainReport};

pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Pretrained,
    Evolved,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiameseState {
    pub phi_s: PaCMParams,
    pub m: f64,
    pub provenance: Provenance,
}

impl SiameseState {
    pub fn new(phi_s: PaCMParams, m: f64) -> Result<Self> {
        let state = SiameseState {
            phi_s,
            m,
            provenance: Provenance::Pretrained,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::invalid("m", self.m, "momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Fresh, independent copy of the Siamese weights.
pub fn init_target(siamese: &SiameseState) -> PaCMParams {
    siamese.phi_s.clone()
}

/// `phi_s' = m * phi_s + (1 - m) * target`, element-wise.
pub fn momentum_update(siamese: &SiameseState, target: &PaCMParams) -> Result<SiameseState> {
    siamese.validate()?;
    if !siamese.phi_s.same_shape(target) {
        return Err(Error::Shape("target shapes differ from the Siamese model".into()));
    }
    let m = siamese.m;
    let mut phi = siamese.phi_s.clone();
    for ((_, p), (_, t)) in phi.tensors_mut().into_iter().zip(target.tensors()) {
        for (w, tw) in p.data.iter_mut().zip(&t.data) {
            // exact at both endpoints and whenever the two weights agree
            if *w != *tw {
                let (lo, hi) = if *w < *tw { (*w, *tw) } else { (*tw, *w) };
                *w = (m * *w + (1.0 - m) * tw).clamp(lo, hi);
            }
        }
    }
    Ok(SiameseState {
        phi_s: phi,
        m,
        provenance: Provenance::Evolved,
    })
}

/// One adaptation step: fine-tune a target initialized from the Siamese
/// weights, then pull the Siamese weights toward it.
pub fn update_moa<R: Rng + ?Sized>(
    siamese: &SiameseState,
    groups: &[RankGroup],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(PaCMParams, SiameseState, TrainReport)> {
    if groups.iter().all(|g| g.features.is_empty()) {
        return Err(Error::Input("no tuning records to adapt on".into()));
    }
    let target = init_target(siamese);
    let (target, report) = train(&target, groups, cfg, rng)?;
    let next = momentum_update(siamese, &target)?;
    Ok((target, next, report))
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    m: f64,
    provenance: Provenance,
}

pub fn checkpoint_to_json(state: &SiameseState) -> String {
    let extra = serde_json::to_value(CheckpointExtra {
        m: state.m,
        provenance: state.provenance,
    })
    .expect("checkpoint header serializes");
    let serde_json::Value::Object(map) = extra else {
        unreachable!("struct serializes to an object")
    };
    model_to_json(&state.phi_s, map)
}

pub fn checkpoint_from_json(text: &str) -> Result<SiameseState> {
    let (phi_s, extra) = model_from_json(text)?;
    let header: CheckpointExtra = serde_json::from_value(serde_json::Value::Object(extra))
        .map_err(|e| Error::parse("checkpoint", e))?;
    let state = SiameseState {
        phi_s,
        m: header.m,
        provenance: header.provenance,
    };
    state.validate()?;
    Ok(state)
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &SiameseState) -> Result<()> {
    write_file(path.as_ref(), checkpoint_to_json(state))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SiameseState> {
    checkpoint_from_json(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled(h: usize, value: f64) -> PaCMParams {
        let mut p = PaCMParams::zeros(h);
        for (_, t) in p.tensors_mut() {
            t.data.iter_mut().for_each(|w| *w = value);
        }
        p
    }

    #[test]
    fn target_is_an_independent_copy() {
        let s = SiameseState::new(PaCMParams::init(4, &mut ChaCha8Rng::seed_from_u64(1)), 0.99).unwrap();
        let mut a = init_target(&s);
        let b = init_target(&s);
        assert_eq!(a, s.phi_s);
        a.head_b2.data[0] += 1.0;
        assert_eq!(b, s.phi_s);
        assert_ne!(a, s.phi_s);
    }

    #[test]
    fn momentum_endpoints() {
        let phi = PaCMParams::init(4, &mut ChaCha8Rng::seed_from_u64(2));
        let target = PaCMParams::init(4, &mut ChaCha8Rng::seed_from_u64(3));
        let s0 = SiameseState::new(phi.clone(), 0.0).unwrap();
        assert_eq!(momentum_update(&s0, &target).unwrap().phi_s, target);
        let s1 = SiameseState::new(phi.clone(), 1.0 - f64::EPSILON).unwrap();
        let same = momentum_update(&s1, &phi).unwrap();
        assert_eq!(same.phi_s, phi);
        assert_eq!(same.provenance, Provenance::Evolved);
    }

    #[test]
    fn momentum_from_zero_to_one() {
        let s = SiameseState::new(filled(4, 0.0), DEFAULT_MOMENTUM).unwrap();
        let next = momentum_update(&s, &filled(4, 1.0)).unwrap();
        for (_, t) in next.phi_s.tensors() {
            for w in &t.data {
                assert!((w - 0.01).abs() <= 4.0 * f64::EPSILON);
            }
        }
    }

    #[test]
    fn rejects_bad_momentum_and_shapes() {
        assert!(SiameseState::new(PaCMParams::zeros(4), 1.0).is_err());
        assert!(SiameseState::new(PaCMParams::zeros(4), -0.1).is_err());
        let s = SiameseState::new(PaCMParams::zeros(4), 0.5).unwrap();
        assert!(matches!(momentum_update(&s, &PaCMParams::zeros(5)), Err(Error::Shape(_))));
        assert!(update_moa(&s, &[], &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = SiameseState::new(PaCMParams::init(4, &mut ChaCha8Rng::seed_from_u64(9)), 0.9).unwrap();
        s.provenance = Provenance::Evolved;
        let back = checkpoint_from_json(&checkpoint_to_json(&s)).unwrap();
        assert_eq!(back, s);
    }
}

//! End-to-end training of every network a pipeline mode needs, from
//! preprocessed subjects to a weights file.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{SliceData, Stage1Data, Stage2Data, Subject};
use super::trainer::{train, Dataset, EpochSummary, TrainConfig, TrainLog};
use crate::config::ToolConfig;
use crate::error::{Error, Result};
use crate::nn::{build_linknet, NetworkConfig, NetworkWeights, WeightSet};
use crate::pipeline::{Mode, View, ROLE_STAGE1, ROLE_STAGE2};

const ROLE_ORDER: [&str; 5] = [ROLE_STAGE1, ROLE_STAGE2, "sagittal", "coronal", "axial"];

/// Roles trained for `mode`, in training order.
pub fn roles(mode: Mode, views: &[View]) -> Vec<&'static str> {
    let mut r = vec![ROLE_STAGE1];
    match mode {
        Mode::ThreeD => r.push(ROLE_STAGE2),
        Mode::TwoD => r.extend(views.iter().map(|v| v.role())),
    }
    r
}

fn fit(
    role: &str,
    net: &NetworkConfig,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    stream: u64,
    start: Option<&NetworkWeights>,
    report: &mut dyn FnMut(&str, &EpochSummary),
) -> Result<(NetworkWeights, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let fresh;
    let init = match start {
        Some(w) => w,
        None => {
            fresh = build_linknet(net, &mut rng)?;
            &fresh
        }
    };
    train(init, data, cfg, |s, _| {
        report(role, s);
        Ok(())
    })
}

/// Trains stage 1 plus either stage 2 (3D) or one network per view (2D).
/// `report` sees every finished epoch.
pub fn train_models(
    subjects: &[Subject],
    cfg: &ToolConfig,
    report: impl FnMut(&str, &EpochSummary),
) -> Result<(WeightSet, Vec<(String, TrainLog)>)> {
    train_roles(subjects, cfg, &roles(cfg.pipeline.mode, &cfg.pipeline.views), report)
}

/// Trains just the listed roles. Each role's initialization and sample
/// stream depend only on its name and the seed, so a role trained alone
/// matches the same role trained alongside others. The exception is a
/// warm-started stage 2, which needs stage 1 listed before it.
pub fn train_roles(
    subjects: &[Subject],
    cfg: &ToolConfig,
    which: &[&str],
    mut report: impl FnMut(&str, &EpochSummary),
) -> Result<(WeightSet, Vec<(String, TrainLog)>)> {
    cfg.validate()?;
    let p = &cfg.pipeline;
    let mut set = WeightSet::default();
    let mut logs = Vec::new();
    for &role in which {
        let stream = ROLE_ORDER
            .iter()
            .position(|r| *r == role)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown network role '{role}'")))? as u64
            + 1;
        let (w, log) = if role == ROLE_STAGE1 {
            let data = Stage1Data::new(subjects, p.stage1_size, cfg.augment.clone())?;
            fit(role, &cfg.network.stage1, &data, &cfg.train.stage1, stream, None, &mut report)?
        } else if role == ROLE_STAGE2 {
            let start = match cfg.train.stage2_from_stage1 {
                true => Some(set.get(ROLE_STAGE1).ok_or_else(|| {
                    Error::InvalidConfig("warm-started stage 2 needs stage 1 trained first".into())
                })?),
                false => None,
            };
            let data = Stage2Data::new(subjects, p.stage2_size, p.margin_fraction, cfg.augment.clone())?;
            fit(role, &cfg.network.stage2, &data, &cfg.train.stage2, stream, start, &mut report)?
        } else {
            let view = *View::ALL.iter().find(|v| v.role() == role).expect("view role");
            let mut data = SliceData::new(subjects, p.stage2_size, p.margin_fraction, view, cfg.augment.clone())?;
            data.channels = cfg.network.view2d.in_channels;
            fit(role, &cfg.network.view2d, &data, &cfg.train.view2d, stream, None, &mut report)?
        };
        set.insert(role, w);
        logs.push((role.to_string(), log));
    }
    Ok((set, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    #[test]
    fn warm_stage2_needs_stage1_first() {
        let cfg = ToolConfig::profile(Profile::Desk);
        let err = train_roles(&[], &cfg, &[ROLE_STAGE2], |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
        assert!(train_roles(&[], &cfg, &["frontal"], |_, _| {}).is_err());
    }
}

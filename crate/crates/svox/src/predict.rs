//! Threaded whole-volume prediction. Slices are independent, so workers map
//! over them and results are assembled in slice order; output bytes are
//! identical to the serial path in `svox_core::inference`.

use rayon::prelude::*;

use svox_core::inference::{
    assemble_prediction, average3, predict_slice, reorient_pair, Ensemble, InferenceError,
};
use svox_core::model::Network;
use svox_core::sampler::NormalizationSpec;
use svox_core::volume::{Orientation, Volume};

pub fn predict_volume_parallel(
    net: &Network,
    norm: &NormalizationSpec,
    orientation: Orientation,
    echo1: &Volume,
    echo2: &Volume,
) -> Result<Volume, InferenceError> {
    let pair = reorient_pair(echo1, echo2, orientation)?;
    let dims = pair.echo1.dims;
    let slices: Result<Vec<Vec<f32>>, InferenceError> =
        (0..dims[2]).into_par_iter().map(|z| predict_slice(net, norm, &pair, z)).collect();
    Ok(assemble_prediction(slices?, dims, pair.echo1.spacing_mm, orientation))
}

pub fn predict_ensemble_parallel(
    ensemble: &Ensemble,
    echo1: &Volume,
    echo2: &Volume,
) -> Result<Volume, InferenceError> {
    ensemble.validate()?;
    let mut preds = Vec::with_capacity(3);
    for (net, norm, orientation) in &ensemble.members {
        preds.push(predict_volume_parallel(net, norm, *orientation, echo1, echo2)?);
    }
    Ok(average3(&preds[0], &preds[1], &preds[2]))
}

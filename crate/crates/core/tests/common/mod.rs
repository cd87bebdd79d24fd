#![allow(dead_code)]

use crnn::framing::WindowSpec;
use crnn::layers::{CrnnLayerConfig, ExtractorKind, Reduction, StateSource};
use crnn::model::ModelConfig;
use crnn::Activation;

pub const REDUCTIONS: [Reduction; 3] = [Reduction::Max, Reduction::Mean, Reduction::Last];

/// Every kind with every source/reduction it accepts (conv: every
/// activation), with and without pooling.
pub fn layer_cases() -> Vec<(String, CrnnLayerConfig)> {
    let window = WindowSpec { width: 3, shift: 2 };
    let pool = WindowSpec { width: 2, shift: 1 };
    let mut cases = Vec::new();
    for pooled in [false, true] {
        let p = pooled.then_some(pool);
        let tag = if pooled { "pooled" } else { "unpooled" };
        for act in [Activation::Tanh, Activation::Relu, Activation::Sigmoid] {
            let mut c = CrnnLayerConfig::new(ExtractorKind::Conv, window, p, 3, StateSource::Hidden, Reduction::Last);
            c.activation = act;
            cases.push((format!("conv/{}/{tag}", act.name()), c));
        }
        for kind in [ExtractorKind::Clstm, ExtractorKind::ExtendedClstm, ExtractorKind::Cblstm] {
            let sources: &[StateSource] = if kind == ExtractorKind::Cblstm {
                &[StateSource::Hidden, StateSource::Cell]
            } else {
                &[StateSource::Hidden, StateSource::Cell, StateSource::Output]
            };
            for &source in sources {
                for reduction in REDUCTIONS {
                    let mut c = CrnnLayerConfig::new(kind, window, p, 3, source, reduction);
                    if source == StateSource::Output || kind == ExtractorKind::Cblstm {
                        c.hidden = 4;
                    }
                    cases.push((format!("{kind}/{source}/{reduction}/{tag}"), c));
                }
            }
        }
    }
    cases
}

/// The emotion and age/gender architectures, shrunk.
pub fn toy_models() -> Vec<(String, ModelConfig)> {
    let mut out = vec![("emotion".to_string(), ModelConfig::emotion(3, 2).with_dims(4, 5, 6))];
    for kind in [ExtractorKind::Conv, ExtractorKind::Clstm, ExtractorKind::Cblstm] {
        out.push((
            format!("age_gender/{kind}"),
            ModelConfig::age_gender(Some(kind), 3, 3).with_dims(4, 5, 6),
        ));
    }
    out
}

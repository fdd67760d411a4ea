use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Granularity, QScheme, ScaleForm, Signedness, Symmetry};
use crate::error::{Error, Result};

/// Fake-quantize placement policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphPolicy {
    /// Only conv/linear inputs and weights are quantized.
    Graph1,
    /// Block inputs/outputs are quantized too; each add keeps one INT32 operand.
    Graph2,
    /// As graph2, with every add input quantized.
    Graph3,
}

impl GraphPolicy {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "graph1" | "academic" | "1" => Ok(Self::Graph1),
            "graph2" | "2" => Ok(Self::Graph2),
            "graph3" | "3" => Ok(Self::Graph3),
            _ => Err(Error::InvalidArgument(format!("unknown graph policy `{name}`"))),
        }
    }
}

impl fmt::Display for GraphPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Graph1 => "graph1",
            Self::Graph2 => "graph2",
            Self::Graph3 => "graph3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendPreset {
    pub name: &'static str,
    pub weight: QScheme,
    pub activation: QScheme,
    pub policy: GraphPolicy,
    pub fold_bn: bool,
}

pub const PRESET_NAMES: [&str; 6] = ["academic", "trt", "acl", "tvm", "snpe", "fbgemm"];

const PER_TENSOR: Granularity = Granularity::PerTensor;
const PER_CHANNEL: Granularity = Granularity::PerChannel { axis: 0 };

const fn scheme(
    symmetry: Symmetry,
    granularity: Granularity,
    scale_form: ScaleForm,
    signedness: Signedness,
) -> QScheme {
    QScheme {
        bits: 8,
        symmetry,
        granularity,
        scale_form,
        signedness,
    }
}

pub fn backend_preset(name: &str) -> Result<BackendPreset> {
    use ScaleForm::{Fp32, Pot};
    use Signedness::{Adaptive, Signed, Unsigned};
    use Symmetry::{Asymmetric, Symmetric};
    let p = |name, weight, activation, policy, fold_bn| BackendPreset {
        name,
        weight,
        activation,
        policy,
        fold_bn,
    };
    Ok(match name {
        "academic" => p(
            "academic",
            scheme(Symmetric, PER_TENSOR, Fp32, Signed),
            scheme(Symmetric, PER_TENSOR, Fp32, Adaptive),
            GraphPolicy::Graph1,
            false,
        ),
        "trt" => p(
            "trt",
            scheme(Symmetric, PER_CHANNEL, Fp32, Signed),
            scheme(Symmetric, PER_TENSOR, Fp32, Signed),
            GraphPolicy::Graph2,
            true,
        ),
        // Table 1 marks ACL weights asymmetric; the backend description reads
        // "symmetric per-channel for weight". The description is followed.
        "acl" => p(
            "acl",
            scheme(Symmetric, PER_CHANNEL, Fp32, Signed),
            scheme(Asymmetric, PER_TENSOR, Fp32, Unsigned),
            GraphPolicy::Graph1,
            true,
        ),
        "tvm" => p(
            "tvm",
            scheme(Symmetric, PER_TENSOR, Pot, Signed),
            scheme(Symmetric, PER_TENSOR, Pot, Signed),
            GraphPolicy::Graph3,
            true,
        ),
        "snpe" => p(
            "snpe",
            scheme(Asymmetric, PER_TENSOR, Fp32, Signed),
            scheme(Asymmetric, PER_TENSOR, Fp32, Unsigned),
            GraphPolicy::Graph3,
            true,
        ),
        "fbgemm" => p(
            "fbgemm",
            scheme(Asymmetric, PER_CHANNEL, Fp32, Signed),
            scheme(Asymmetric, PER_TENSOR, Fp32, Unsigned),
            GraphPolicy::Graph3,
            true,
        ),
        other => return Err(Error::UnknownPreset(other.to_string())),
    })
}

impl BackendPreset {
    /// Same preset at another bit-width.
    pub fn with_bits(mut self, bits: u8) -> Result<Self> {
        self.weight = self.weight.with_bits(bits)?;
        self.activation = self.activation.with_bits(bits)?;
        Ok(self)
    }

    pub fn is_hardware(&self) -> bool {
        self.name != "academic"
    }
}

fn describe(s: &QScheme) -> String {
    let gran = match s.granularity {
        Granularity::PerTensor => "per-tensor",
        Granularity::PerChannel { .. } => "per-channel",
    };
    let sym = match s.symmetry {
        Symmetry::Symmetric => "symmetric",
        Symmetry::Asymmetric => "asymmetric",
    };
    let form = match s.scale_form {
        ScaleForm::Fp32 => "FP32",
        ScaleForm::Pot => "POT",
    };
    let sign = match s.signedness {
        Signedness::Signed => "signed",
        Signedness::Unsigned => "unsigned",
        Signedness::Adaptive => "adaptive",
    };
    format!("{gran}, {sym}, {form}, {sign}")
}

impl BackendPreset {
    pub fn weight_description(&self) -> String {
        describe(&self.weight)
    }

    pub fn activation_description(&self) -> String {
        describe(&self.activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows() {
        let trt = backend_preset("trt").unwrap();
        assert!(trt.weight.is_per_channel());
        assert_eq!(trt.weight.symmetry, Symmetry::Symmetric);
        assert_eq!(trt.weight.scale_form, ScaleForm::Fp32);
        assert_eq!(trt.policy, GraphPolicy::Graph2);
        assert!(trt.fold_bn);

        let tvm = backend_preset("tvm").unwrap();
        assert_eq!(tvm.weight.scale_form, ScaleForm::Pot);
        assert_eq!(tvm.activation.scale_form, ScaleForm::Pot);
        assert!(!tvm.weight.is_per_channel());
        assert_eq!(tvm.policy, GraphPolicy::Graph3);

        let ac = backend_preset("academic").unwrap();
        assert_eq!(ac.activation.signedness, Signedness::Adaptive);
        assert_eq!(ac.policy, GraphPolicy::Graph1);
        assert!(!ac.fold_bn);
    }

    #[test]
    fn only_academic_is_adaptive() {
        for name in PRESET_NAMES {
            let p = backend_preset(name).unwrap();
            let adaptive = p.activation.signedness == Signedness::Adaptive
                || p.weight.signedness == Signedness::Adaptive;
            assert_eq!(adaptive, name == "academic", "{name}");
        }
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(backend_preset("npu"), Err(Error::UnknownPreset(_))));
    }
}

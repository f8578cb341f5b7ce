//! Declarative network description and its line-based `key = value` file
//! format with `[stage]` sections.
//!
//! ```text
//! # toy network
//! alpha = 1.0
//! classes = 10
//! stem_channels = 8
//! gamma_default = 2
//! input_channels = 1
//!
//! [stage]
//! in = 8
//! exp = 16
//! out = 8
//! stride = 2
//! ```

use crate::error::{Error, Result};

/// One residual bottleneck stage: channel chain in -> exp -> out.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub in_channels: usize,
    pub expansion_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Per-stage partition ratio; falls back to the network default.
    pub gamma: Option<usize>,
}

/// Whole-network description: stem, ordered stages, width multiplier and the
/// classifier head size.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub alpha: f32,
    pub classes: usize,
    pub stem_channels: usize,
    pub gamma_default: usize,
    pub input_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl NetworkSpec {
    pub fn stage_gamma(&self, stage: &StageSpec) -> usize {
        stage.gamma.unwrap_or(self.gamma_default)
    }

    /// Semantic validation: chaining, ranges, and the gamma floor.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        if self.stem_channels < 2 {
            return Err(Error::Config("stem_channels must be >= 2".into()));
        }
        if self.input_channels < 1 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.gamma_default < 2 {
            return Err(Error::Config("gamma_default must be >= 2".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        let mut prev_out = self.stem_channels;
        for (i, st) in self.stages.iter().enumerate() {
            let stage_no = i + 1;
            if st.in_channels != prev_out {
                return Err(Error::Config(format!(
                    "stage {stage_no}: in = {} does not chain from previous output {}",
                    st.in_channels, prev_out
                )));
            }
            if st.stride != 1 && st.stride != 2 {
                return Err(Error::Config(format!(
                    "stage {stage_no}: stride must be 1 or 2, got {}",
                    st.stride
                )));
            }
            if st.expansion_channels < 2 || st.out_channels < 2 {
                return Err(Error::Config(format!(
                    "stage {stage_no}: exp and out channels must be >= 2"
                )));
            }
            if let Some(g) = st.gamma {
                if g < 2 {
                    return Err(Error::Config(format!(
                        "stage {stage_no}: gamma must be >= 2, got {g}"
                    )));
                }
            }
            prev_out = st.out_channels;
        }
        Ok(())
    }
}

/// Width-multiplier channel scaling: `alpha * c` rounded up to the nearest
/// multiple of 4, at least 4. `alpha == 1` passes channels through unchanged.
pub fn scale_channels(alpha: f32, channels: usize) -> usize {
    if alpha == 1.0 {
        return channels;
    }
    let scaled = alpha as f64 * channels as f64;
    let rounded = ((scaled / 4.0).ceil() * 4.0) as usize;
    rounded.max(4)
}

const TOP_KEYS: [&str; 5] = [
    "alpha",
    "classes",
    "stem_channels",
    "gamma_default",
    "input_channels",
];
const STAGE_KEYS: [&str; 5] = ["in", "exp", "out", "stride", "gamma"];

/// Parse the text form. Unknown and duplicate keys are rejected with their
/// 1-based line number; semantic checks run afterwards via
/// [`NetworkSpec::validate`].
pub fn parse_network_config(text: &str) -> Result<NetworkSpec> {
    struct RawStage {
        values: Vec<(String, String, usize)>,
    }

    let mut top: Vec<(String, String, usize)> = Vec::new();
    let mut stages: Vec<RawStage> = Vec::new();
    let mut in_stage = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if content != "[stage]" {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown section {content}, expected [stage]"),
                });
            }
            stages.push(RawStage { values: Vec::new() });
            in_stage = true;
            continue;
        }
        let eq = content.find('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected key = value, got {content:?}"),
        })?;
        let key = content[..eq].trim().to_string();
        let value = content[eq + 1..].trim().to_string();
        if value.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("missing value for key {key}"),
            });
        }
        let (allowed, bucket): (&[&str], &mut Vec<(String, String, usize)>) = if in_stage {
            (&STAGE_KEYS, &mut stages.last_mut().unwrap().values)
        } else {
            (&TOP_KEYS, &mut top)
        };
        if !allowed.contains(&key.as_str()) {
            return Err(Error::Parse {
                line,
                message: format!(
                    "unknown key {key} in {} section",
                    if in_stage { "[stage]" } else { "top-level" }
                ),
            });
        }
        if bucket.iter().any(|(k, _, _)| k == &key) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key {key}"),
            });
        }
        bucket.push((key, value, line));
    }

    let find = |bucket: &[(String, String, usize)], key: &str| -> Option<(String, usize)> {
        bucket
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.clone(), *l))
    };
    let parse_usize = |v: &str, line: usize, key: &str| -> Result<usize> {
        v.parse::<usize>().map_err(|_| Error::Parse {
            line,
            message: format!("{key} must be a non-negative integer, got {v:?}"),
        })
    };

    let alpha = match find(&top, "alpha") {
        Some((v, line)) => v.parse::<f32>().map_err(|_| Error::Parse {
            line,
            message: format!("alpha must be a real number, got {v:?}"),
        })?,
        None => 1.0,
    };
    let classes = match find(&top, "classes") {
        Some((v, line)) => parse_usize(&v, line, "classes")?,
        None => return Err(Error::Config("missing required key: classes".into())),
    };
    let stem_channels = match find(&top, "stem_channels") {
        Some((v, line)) => parse_usize(&v, line, "stem_channels")?,
        None => return Err(Error::Config("missing required key: stem_channels".into())),
    };
    let gamma_default = match find(&top, "gamma_default") {
        Some((v, line)) => parse_usize(&v, line, "gamma_default")?,
        None => 2,
    };
    let input_channels = match find(&top, "input_channels") {
        Some((v, line)) => parse_usize(&v, line, "input_channels")?,
        None => 3,
    };

    let mut stage_specs = Vec::new();
    for (i, raw) in stages.iter().enumerate() {
        let stage_no = i + 1;
        let need = |key: &str| -> Result<(String, usize)> {
            find(&raw.values, key).ok_or_else(|| {
                Error::Config(format!("stage {stage_no}: missing required key {key}"))
            })
        };
        let (v, l) = need("in")?;
        let in_channels = parse_usize(&v, l, "in")?;
        let (v, l) = need("exp")?;
        let expansion_channels = parse_usize(&v, l, "exp")?;
        let (v, l) = need("out")?;
        let out_channels = parse_usize(&v, l, "out")?;
        let (v, l) = need("stride")?;
        let stride = parse_usize(&v, l, "stride")?;
        let gamma = match find(&raw.values, "gamma") {
            Some((v, l)) => Some(parse_usize(&v, l, "gamma")?),
            None => None,
        };
        stage_specs.push(StageSpec {
            in_channels,
            expansion_channels,
            out_channels,
            stride,
            gamma,
        });
    }

    let spec = NetworkSpec {
        alpha,
        classes,
        stem_channels,
        gamma_default,
        input_channels,
        stages: stage_specs,
    };
    spec.validate()?;
    Ok(spec)
}

/// Canonical text form; `parse(emit(spec))` reproduces the spec exactly.
pub fn emit_network_config(spec: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!("alpha = {}\n", spec.alpha));
    out.push_str(&format!("classes = {}\n", spec.classes));
    out.push_str(&format!("stem_channels = {}\n", spec.stem_channels));
    out.push_str(&format!("gamma_default = {}\n", spec.gamma_default));
    out.push_str(&format!("input_channels = {}\n", spec.input_channels));
    for st in &spec.stages {
        out.push_str("\n[stage]\n");
        out.push_str(&format!("in = {}\n", st.in_channels));
        out.push_str(&format!("exp = {}\n", st.expansion_channels));
        out.push_str(&format!("out = {}\n", st.out_channels));
        out.push_str(&format!("stride = {}\n", st.stride));
        if let Some(g) = st.gamma {
            out.push_str(&format!("gamma = {g}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "\
# toy config
alpha = 1.0
classes = 10
stem_channels = 8
gamma_default = 2
input_channels = 1

[stage]
in = 8
exp = 16
out = 8
stride = 2

[stage]
in = 8
exp = 16
out = 16
stride = 1
gamma = 4
";

    #[test]
    fn parses_toy_config() {
        let spec = parse_network_config(TOY).unwrap();
        assert_eq!(spec.classes, 10);
        assert_eq!(spec.stages.len(), 2);
        assert_eq!(spec.stages[0].gamma, None);
        assert_eq!(spec.stage_gamma(&spec.stages[0]), 2);
        assert_eq!(spec.stage_gamma(&spec.stages[1]), 4);
    }

    #[test]
    fn emit_parse_roundtrip() {
        let spec = parse_network_config(TOY).unwrap();
        let text = emit_network_config(&spec);
        let again = parse_network_config(&text).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn empty_stage_list_is_rejected() {
        let err = parse_network_config("classes = 10\nstem_channels = 8\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("at least one stage"), "{msg}"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn duplicate_key_cites_line() {
        let text = "classes = 10\nstem_channels = 8\nclasses = 12\n[stage]\nin = 8\nexp = 16\nout = 8\nstride = 1\n";
        match parse_network_config(text).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn unknown_key_cites_line() {
        let text = "classes = 10\nstem_channels = 8\nwidth = 2\n";
        match parse_network_config(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn broken_chaining_names_the_stage() {
        let text =
            "classes = 10\nstem_channels = 8\n[stage]\nin = 16\nexp = 16\nout = 8\nstride = 1\n";
        match parse_network_config(text).unwrap_err() {
            Error::Config(msg) => assert!(msg.contains("stage 1"), "{msg}"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn alpha_scaling_rule() {
        assert_eq!(scale_channels(1.0, 10), 10); // identity multiplier leaves channels alone
        assert_eq!(scale_channels(0.5, 16), 8);
        assert_eq!(scale_channels(0.5, 10), 8); // ceil(5 / 4) * 4
        assert_eq!(scale_channels(0.25, 8), 4); // floor at 4
        assert_eq!(scale_channels(2.0, 6), 12);
    }
}

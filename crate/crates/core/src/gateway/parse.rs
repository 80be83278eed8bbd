use std::sync::OnceLock;

use regex::Regex;

use super::{GatewayError, ParseStatus};
use crate::corpus::Label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsedPrediction {
    pub label: Label,
    pub confidence: f64,
    pub status: ParseStatus,
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\(\s*(p|h)\s*\)|dementia patient|healthy control").unwrap())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d*\.\d+|\d+)(\s*%)?").unwrap())
}

/// Extracts the last label marker and the last probability-like number.
///
/// Probabilities are decimals (`0.85`, `.85`) or percentages (`85%`); bare
/// integers are ignored since reasoning text is full of counts.
pub fn parse_prediction(text: &str) -> Result<ParsedPrediction, GatewayError> {
    let label = label_re()
        .captures_iter(text)
        .last()
        .map(|caps| {
            let whole = caps.get(0).unwrap().as_str().to_ascii_lowercase();
            match caps.get(1).map(|m| m.as_str().to_ascii_lowercase()) {
                Some(t) if t == "p" => Label::Patient,
                Some(_) => Label::Control,
                None if whole.starts_with("dementia") => Label::Patient,
                None => Label::Control,
            }
        })
        .ok_or_else(|| GatewayError::UnparsableCompletion(text.to_string()))?;

    let probability = number_re().captures_iter(text).filter_map(|caps| {
        let digits = caps.get(1).unwrap().as_str();
        let value: f64 = digits.parse().ok()?;
        if caps.get(2).is_some() {
            Some(value / 100.0)
        } else if digits.contains('.') {
            Some(value)
        } else {
            None
        }
    });

    Ok(match probability.last() {
        None => ParsedPrediction {
            label,
            confidence: 0.5,
            status: ParseStatus::Fallback,
        },
        Some(p) if (0.0..=1.0).contains(&p) => ParsedPrediction {
            label,
            confidence: p,
            status: ParseStatus::Clean,
        },
        Some(p) => ParsedPrediction {
            label,
            confidence: p.clamp(0.0, 1.0),
            status: ParseStatus::Clamped,
        },
    })
}

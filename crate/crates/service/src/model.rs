//! Wire types. Every response body carries `schema_version`.

use genclass::data::ConfidenceLevel;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyMode {
    Turing,
    Labelling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyItem {
    pub item_id: String,
    /// Image file, absolute or relative to the server's image root.
    pub image_path: String,
    #[serde(default)]
    pub truth_is_real: bool,
    #[serde(default)]
    pub intended_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub study_id: String,
    pub items: Vec<StudyItem>,
    pub mode: StudyMode,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub rater_id: String,
    /// Years of experience, used to break majority-vote ties.
    #[serde(default)]
    pub seniority_years: Option<f64>,
}

/// A judgment as submitted by a rater. Study and rater come from the
/// session token; `timestamp` is informational and ignored when comparing
/// duplicate submissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub item_id: String,
    #[serde(default)]
    pub guessed_real: Option<bool>,
    pub guessed_class: String,
    #[serde(default)]
    pub confidence: Option<ConfidenceLevel>,
    #[serde(default)]
    pub timestamp: Option<String>,
}

impl AnnotationRecord {
    pub fn same_answer(&self, other: &AnnotationRecord) -> bool {
        self.item_id == other.item_id
            && self.guessed_real == other.guessed_real
            && self.guessed_class == other.guessed_class
            && self.confidence == other.confidence
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCreated {
    pub schema_version: u32,
    pub study_id: String,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub schema_version: u32,
    pub token: String,
    pub study_id: String,
    pub rater_id: String,
    pub item_order: Vec<String>,
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextItem {
    pub schema_version: u32,
    pub done: bool,
    pub item_id: Option<String>,
    pub image_url: Option<String>,
    pub mode: StudyMode,
    pub classes: Vec<String>,
    pub position: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AckStatus {
    Stored,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentAck {
    pub schema_version: u32,
    pub status: AckStatus,
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Closed {
    pub schema_version: u32,
    pub study_id: String,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabellingReport {
    pub n_records: usize,
    /// item_id -> majority label.
    pub majority_votes: std::collections::BTreeMap<String, String>,
    pub confidence_matrix: genclass::evaluation::ConfidenceMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum StudyReportBody {
    Turing(genclass::evaluation::TuringReport),
    Labelling(LabellingReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub study_id: String,
    pub report: StudyReportBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub schema_version: u32,
    pub error: ErrorBody,
}

//! Stepwise solution trajectories and their calibration.
//!
//! The student answers each sampled instance in think-then-answer form.
//! Correct trajectories become solution SFT data. Wrong ones go to a teacher
//! that names the first flawed step, explains why it fails, and rebuilds the
//! reasoning from there; the corrected and original trajectories form a
//! preference pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, SftRecord};
use crate::gateway::{Gateway, Message, PromptRequest, DEFAULT_TRAJECTORY_MAX_TOKENS};
use crate::model::{
    CorrectionResult, ModelRole, PairInvariant, PreferencePair, TaskInstance, TaskKind, Trajectory, Vocabulary,
};
use crate::parse::{extract_json_object, parse_trajectory};
use crate::prompt::{answer_options, task_description, PromptError, ERROR_CORRECTION, SOLUTION_GENERATION};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_STUDENT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_CORRECTION_TEMPERATURE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings { temperature: DEFAULT_STUDENT_TEMPERATURE, max_tokens: DEFAULT_TRAJECTORY_MAX_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionSettings {
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_attempts: u32,
}

impl Default for CorrectionSettings {
    fn default() -> Self {
        CorrectionSettings {
            temperature: DEFAULT_CORRECTION_TEMPERATURE,
            max_tokens: DEFAULT_TRAJECTORY_MAX_TOKENS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

pub fn solution_prompt(vocab: &Vocabulary, instance: &TaskInstance) -> Result<Vec<Message>, PromptError> {
    let options = answer_options(vocab, instance.task);
    let input = instance.input.render();
    SOLUTION_GENERATION.render(&[
        ("task_description", task_description(instance.task)),
        ("answer_options", &options),
        ("input", &input),
    ])
}

/// User turn of the solution prompt; used verbatim as the DPO prompt and
/// the solution SFT instruction.
pub fn solution_prompt_text(vocab: &Vocabulary, instance: &TaskInstance) -> Result<String, PromptError> {
    Ok(solution_prompt(vocab, instance)?.pop().map(|m| m.content).unwrap_or_default())
}

/// Student trajectories for a batch of instances, index-aligned.
pub fn generate_trajectories(
    gateway: &Gateway,
    vocab: &Vocabulary,
    instances: &[TaskInstance],
    student: &ModelRole,
    settings: &GenerationSettings,
) -> Result<Vec<Trajectory>, PromptError> {
    let requests = instances
        .iter()
        .map(|inst| {
            Ok(PromptRequest::new(
                &student.endpoint_id,
                format!("generate:{}", inst.id),
                solution_prompt(vocab, inst)?,
                settings.temperature,
                settings.max_tokens,
            ))
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let completions = gateway.complete_batch(&requests);
    Ok(instances
        .iter()
        .zip(completions)
        .map(|(inst, c)| {
            if c.is_error() {
                Trajectory::failed(format!("generation failed: {}", c.error.unwrap_or_default()))
            } else {
                parse_trajectory(&c.text, inst.task, vocab)
            }
        })
        .collect())
}

pub fn generate_trajectory(
    gateway: &Gateway,
    vocab: &Vocabulary,
    instance: &TaskInstance,
    student: &ModelRole,
    settings: &GenerationSettings,
) -> Result<Trajectory, PromptError> {
    Ok(generate_trajectories(gateway, vocab, std::slice::from_ref(instance), student, settings)?.remove(0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub correct: usize,
    pub erroneous: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Partition {
    pub correct: Vec<(TaskInstance, Trajectory)>,
    pub erroneous: Vec<(TaskInstance, Trajectory)>,
    /// Counts per (task, source).
    pub counts: BTreeMap<(TaskKind, String), PartitionCounts>,
}

/// Splits generations by answer correctness. Unparseable ones are erroneous.
pub fn partition_trajectories(items: Vec<(TaskInstance, Trajectory)>) -> Partition {
    let mut p = Partition::default();
    for (inst, traj) in items {
        let counts = p.counts.entry((inst.task, inst.source.clone())).or_default();
        if traj.is_correct_for(&inst.gold) {
            counts.correct += 1;
            p.correct.push((inst, traj));
        } else {
            counts.erroneous += 1;
            p.erroneous.push((inst, traj));
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum CorrectionError {
    #[error("correction failed after {attempts} attempt(s): {reason}")]
    CorrectionFailed { attempts: u32, reason: String },
    #[error("teacher named step {index}, trajectory has {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
}

fn correction_prompt(
    vocab: &Vocabulary,
    instance: &TaskInstance,
    rejected: &Trajectory,
) -> Result<Vec<Message>, PromptError> {
    let options = answer_options(vocab, instance.task);
    let input = instance.input.render();
    let steps: String = rejected
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Step {}: {}\n", i + 1, s))
        .collect();
    let answer = rejected
        .answer
        .as_ref()
        .map(|l| l.value().to_string())
        .or_else(|| rejected.answer_text.clone())
        .unwrap_or_else(|| "no usable answer".into());
    ERROR_CORRECTION.render(&[
        ("task_description", task_description(instance.task)),
        ("answer_options", &options),
        ("input", &input),
        ("gold", instance.gold.value()),
        ("steps", steps.trim_end()),
        ("answer", &answer),
    ])
}

#[derive(Deserialize)]
struct TeacherCorrection {
    first_error_step: usize,
    #[serde(default)]
    reflection: String,
    revised_steps: Vec<String>,
    answer: String,
}

/// Validates one teacher reply and splices the corrected trajectory.
pub fn apply_correction(
    vocab: &Vocabulary,
    instance: &TaskInstance,
    rejected: &Trajectory,
    reply: &str,
) -> Result<CorrectionResult, CorrectionError> {
    let fail = |reason: String| CorrectionError::CorrectionFailed { attempts: 1, reason };
    let value = extract_json_object(reply).ok_or_else(|| fail("reply holds no JSON object".into()))?;
    let parsed: TeacherCorrection =
        serde_json::from_value(value).map_err(|e| fail(format!("unexpected correction shape: {e}")))?;
    let len = rejected.steps.len();
    let k = parsed.first_error_step;
    if k < 1 || k > len {
        return Err(CorrectionError::IndexOutOfRange { index: k, len });
    }
    let revised: Vec<String> = parsed
        .revised_steps
        .iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if revised.is_empty() {
        return Err(fail("no revised steps".into()));
    }
    let answer = vocab
        .canonicalize(instance.task, &parsed.answer)
        .map_err(|_| fail(format!("answer `{}` does not fold onto a label", parsed.answer)))?;
    if answer != instance.gold {
        return Err(fail(format!("corrected answer `{answer}` is not the gold label")));
    }

    let mut steps = rejected.steps[..k - 1].to_vec();
    steps.extend(revised);
    let corrected = Trajectory {
        steps,
        answer_text: Some(answer.value().to_string()),
        answer: Some(answer),
        raw: reply.to_string(),
        parse_ok: true,
        note: None,
    };
    let corrected = Trajectory { raw: corrected.render(), ..corrected };
    CorrectionResult::new(rejected, k, parsed.reflection.trim().to_string(), corrected)
        .map_err(|e| fail(e.to_string()))
}

/// Teacher corrections for erroneous trajectories, index-aligned.
///
/// Each round sends one fresh correction request per still-unresolved item;
/// an item is dropped after `max_attempts` rejected replies.
pub fn correct_trajectories(
    gateway: &Gateway,
    vocab: &Vocabulary,
    items: &[(TaskInstance, Trajectory)],
    teacher: &ModelRole,
    settings: &CorrectionSettings,
) -> Result<Vec<Result<CorrectionResult, CorrectionError>>, PromptError> {
    let mut results: Vec<Option<Result<CorrectionResult, CorrectionError>>> = vec![None; items.len()];
    let mut last_reason: Vec<String> = vec![String::new(); items.len()];
    for (i, (_, rejected)) in items.iter().enumerate() {
        if rejected.steps.is_empty() {
            results[i] = Some(Err(CorrectionError::CorrectionFailed {
                attempts: 0,
                reason: "rejected trajectory has no steps to correct".into(),
            }));
        }
    }
    let prompts = items
        .iter()
        .map(|(inst, rejected)| correction_prompt(vocab, inst, rejected))
        .collect::<Result<Vec<_>, _>>()?;

    for attempt in 1..=settings.max_attempts {
        let pending: Vec<usize> = (0..items.len()).filter(|i| results[*i].is_none()).collect();
        if pending.is_empty() {
            break;
        }
        let requests: Vec<PromptRequest> = pending
            .iter()
            .map(|&i| {
                PromptRequest::new(
                    &teacher.endpoint_id,
                    format!("correct:{}", items[i].0.id),
                    prompts[i].clone(),
                    settings.temperature,
                    settings.max_tokens,
                )
            })
            .collect();
        let completions = gateway.complete_batch(&requests);
        for (&i, completion) in pending.iter().zip(completions) {
            let (inst, rejected) = &items[i];
            let outcome = if completion.is_error() {
                Err(format!("gateway error: {}", completion.error.unwrap_or_default()))
            } else {
                apply_correction(vocab, inst, rejected, &completion.text).map_err(|e| match e {
                    CorrectionError::CorrectionFailed { reason, .. } => reason,
                    other => other.to_string(),
                })
            };
            match outcome {
                Ok(result) => results[i] = Some(Ok(result)),
                Err(reason) => {
                    log::debug!("correction of {} attempt {attempt} rejected: {reason}", inst.id);
                    last_reason[i] = reason;
                }
            }
        }
    }

    Ok(results
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.unwrap_or_else(|| {
                log::info!("dropping {}: {}", items[i].0.id, last_reason[i]);
                Err(CorrectionError::CorrectionFailed {
                    attempts: settings.max_attempts,
                    reason: std::mem::take(&mut last_reason[i]),
                })
            })
        })
        .collect())
}

pub fn correct_trajectory(
    gateway: &Gateway,
    vocab: &Vocabulary,
    instance: &TaskInstance,
    rejected: &Trajectory,
    teacher: &ModelRole,
    settings: &CorrectionSettings,
) -> Result<Result<CorrectionResult, CorrectionError>, PromptError> {
    let items = [(instance.clone(), rejected.clone())];
    Ok(correct_trajectories(gateway, vocab, &items, teacher, settings)?.remove(0))
}

/// chosen = corrected, rejected = original erroneous trajectory.
pub fn build_pref_pairs(
    items: Vec<(TaskInstance, Trajectory, CorrectionResult)>,
) -> Result<Vec<PreferencePair>, PairInvariant> {
    items
        .into_iter()
        .map(|(inst, rejected, correction)| PreferencePair::new(inst, correction.corrected, rejected))
        .collect()
}

/// Solution SFT record for a correct trajectory.
pub fn solution_sft_record(
    vocab: &Vocabulary,
    instance: &TaskInstance,
    trajectory: &Trajectory,
) -> Result<SftRecord, DatasetError> {
    SftRecord::new(solution_prompt_text(vocab, instance)?, "", trajectory.render())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Correct,
    Erroneous,
    Corrected,
    Dropped,
}

/// One line of the trajectory dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryDump {
    pub instance_id: String,
    pub task: TaskKind,
    pub raw: String,
    pub steps: Vec<String>,
    pub answer: Option<String>,
    pub parse_ok: bool,
    pub disposition: Disposition,
}

impl TrajectoryDump {
    pub fn new(instance: &TaskInstance, trajectory: &Trajectory, disposition: Disposition) -> Self {
        TrajectoryDump {
            instance_id: instance.id.clone(),
            task: instance.task,
            raw: trajectory.raw.clone(),
            steps: trajectory.steps.clone(),
            answer: trajectory.answer.as_ref().map(|l| l.value().to_string()),
            parse_ok: trajectory.parse_ok,
            disposition,
        }
    }
}

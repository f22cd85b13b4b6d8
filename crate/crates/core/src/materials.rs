//! Course materials unlocked by course day.

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::model::TaskSpec;
use crate::store::{BlobRef, RecordKind, Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialCategory {
    Slides,
    Exercise,
    ExampleCode,
    Data,
}

impl std::str::FromStr for MaterialCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "slides" => Ok(MaterialCategory::Slides),
            "exercise" => Ok(MaterialCategory::Exercise),
            "example_code" => Ok(MaterialCategory::ExampleCode),
            "data" => Ok(MaterialCategory::Data),
            other => Err(format!("unknown category {other:?} (slides, exercise, example_code, data)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Material {
    pub material_id: String,
    pub title: String,
    /// Name offered to the browser on download.
    pub file_name: String,
    pub blob: BlobRef,
    pub unlock_day: u32,
    pub category: MaterialCategory,
}

/// Materials unlocked on `day`, ordered by `(unlock_day, title)`. The sort
/// is stable, so equal keys keep their input order.
pub fn visible(materials: &[Material], day: u32) -> Vec<Material> {
    let mut out: Vec<Material> = materials.iter().filter(|m| m.unlock_day <= day).cloned().collect();
    out.sort_by(|a, b| (a.unlock_day, &a.title).cmp(&(b.unlock_day, &b.title)));
    out
}

/// Maps dates to course-day indices. Day 0 is the start date; an admin
/// override replaces the computed day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseCalendar {
    pub start_date: NaiveDate,
    /// Global deadline shown as "time left".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub course_end: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_override: Option<u32>,
}

impl CourseCalendar {
    pub fn starting(start_date: NaiveDate) -> Self {
        CourseCalendar { start_date, course_end: None, day_override: None }
    }

    /// Days since the start date; 0 before the course starts.
    pub fn day_on(&self, date: NaiveDate) -> u32 {
        let days = (date - self.start_date).num_days();
        u32::try_from(days.max(0)).unwrap_or(u32::MAX)
    }

    pub fn current_day(&self, now: DateTime<Utc>) -> u32 {
        self.day_override.unwrap_or_else(|| self.day_on(now.date_naive()))
    }

    /// Time until the course end, clamped at zero. `None` without an end.
    pub fn time_left(&self, now: DateTime<Utc>) -> Option<chrono::Duration> {
        self.course_end.map(|end| (end - now).max(chrono::Duration::zero()))
    }
}

/// `H:MM:SS` with unbounded hours, e.g. `76256:27:04`.
pub fn format_time_left(d: chrono::Duration) -> String {
    let secs = d.num_seconds().max(0);
    format!("{}:{:02}:{:02}", secs / 3600, secs / 60 % 60, secs % 60)
}

/// Persisted course state. Only the admin's day override lives here; the
/// start date and course end come from the service configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CourseState {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub day_override: Option<u32>,
}

pub const COURSE_RECORD: &str = "course";

pub fn course_state(store: &Store) -> Result<CourseState, StoreError> {
    Ok(store.get_record(RecordKind::Course, COURSE_RECORD)?.map(|v| v.data).unwrap_or_default())
}

pub fn set_course_day(store: &Store, day: Option<u32>) -> Result<CourseState, StoreError> {
    let state = CourseState { day_override: day };
    store.put_record(RecordKind::Course, COURSE_RECORD, &state)?;
    Ok(state)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Stores the material's bytes and record. Re-adding an id replaces it.
pub fn add_material(
    store: &Store,
    material_id: &str,
    title: &str,
    file_name: &str,
    data: &[u8],
    unlock_day: u32,
    category: MaterialCategory,
) -> Result<Material, StoreError> {
    if !valid_id(material_id) {
        return Err(StoreError::Conflict(format!("invalid material id {material_id:?}")));
    }
    let blob = store.put_blob(data)?;
    let material = Material {
        material_id: material_id.into(),
        title: title.into(),
        file_name: file_name.into(),
        blob,
        unlock_day,
        category,
    };
    store.put_record(RecordKind::Material, material_id, &material)?;
    Ok(material)
}

pub fn remove_material(store: &Store, material_id: &str) -> Result<bool, StoreError> {
    store.delete_record(RecordKind::Material, material_id)
}

pub fn material(store: &Store, material_id: &str) -> Result<Option<Material>, StoreError> {
    Ok(store.get_record(RecordKind::Material, material_id)?.map(|v| v.data))
}

pub fn materials(store: &Store) -> Result<Vec<Material>, StoreError> {
    Ok(store.list_records(RecordKind::Material)?.into_iter().map(|(_, v)| v.data).collect())
}

/// A task's statement must be a known material that unlocks no later than
/// the task itself.
pub fn check_statement(task: &TaskSpec, statement: Option<&Material>) -> Result<(), String> {
    let Some(id) = &task.statement_ref else {
        return Ok(());
    };
    match statement {
        None => Err(format!("statement material {id:?} does not exist")),
        Some(m) if m.material_id != *id => Err(format!("statement material {id:?} does not exist")),
        Some(m) if m.unlock_day > task.unlock_day => Err(format!(
            "statement material {id:?} unlocks on day {} but the task unlocks on day {}",
            m.unlock_day, task.unlock_day
        )),
        Some(_) => Ok(()),
    }
}

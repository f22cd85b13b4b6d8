use chrono::{NaiveDate, TimeZone, Utc};
use proptest::prelude::*;

use sae_core::materials::{
    add_material, format_time_left, materials, remove_material, visible, CourseCalendar, Material, MaterialCategory,
};
use sae_core::store::{BlobRef, Store};

fn mat(id: usize, title: &str, day: u32) -> Material {
    Material {
        material_id: format!("m{id}"),
        title: title.into(),
        file_name: format!("{title}.pdf"),
        blob: BlobRef::of(title.as_bytes()),
        unlock_day: day,
        category: MaterialCategory::Slides,
    }
}

// Oracle: plain filter, then an insertion sort on (day, title) that keeps
// the input order of ties.
fn oracle(ms: &[Material], day: u32) -> Vec<String> {
    let mut out: Vec<&Material> = Vec::new();
    for m in ms.iter().filter(|m| m.unlock_day <= day) {
        let pos = out
            .iter()
            .position(|o| (o.unlock_day, o.title.as_str()) > (m.unlock_day, m.title.as_str()))
            .unwrap_or(out.len());
        out.insert(pos, m);
    }
    out.into_iter().map(|m| m.material_id.clone()).collect()
}

fn ids(ms: &[Material]) -> Vec<String> {
    ms.iter().map(|m| m.material_id.clone()).collect()
}

fn material_set() -> impl Strategy<Value = Vec<Material>> {
    prop::collection::vec((prop::sample::select(vec!["Intro", "Loops", "ORFs", "Data", "intro"]), 0u32..8), 0..25)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, (t, d))| mat(i, t, d)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn matches_naive_filter(ms in material_set(), day in 0u32..10) {
        prop_assert_eq!(ids(&visible(&ms, day)), oracle(&ms, day));
    }

    #[test]
    fn monotone_in_day(ms in material_set(), day in 0u32..10) {
        let today = ids(&visible(&ms, day));
        let tomorrow = ids(&visible(&ms, day + 1));
        for id in &today {
            prop_assert!(tomorrow.contains(id), "{} vanished on day {}", id, day + 1);
        }
    }
}

#[test]
fn threshold_examples() {
    let ms = vec![mat(0, "c", 3), mat(1, "b", 1), mat(2, "a", 0)];
    assert_eq!(ids(&visible(&ms, 1)), ["m2", "m1"]);
    let late = vec![mat(0, "x", 1)];
    assert!(visible(&late, 0).is_empty());
}

#[test]
fn calendar_days_and_time_left() {
    let mut cal = CourseCalendar::starting(NaiveDate::from_ymd_opt(2024, 5, 6).unwrap());
    let at = |d, h| Utc.with_ymd_and_hms(2024, 5, d, h, 0, 0).unwrap();
    assert_eq!(cal.current_day(at(6, 9)), 0);
    assert_eq!(cal.current_day(at(8, 23)), 2);
    let mut last = 0;
    for d in 1..=31 {
        let day = cal.current_day(at(d, 12));
        assert!(day >= last);
        last = day;
    }
    cal.day_override = Some(5);
    assert_eq!(cal.current_day(at(6, 9)), 5);

    cal.course_end = Some(at(10, 17));
    let left = cal.time_left(at(10, 15)).unwrap();
    assert_eq!(format_time_left(left), "2:00:00");
    assert_eq!(format_time_left(cal.time_left(at(20, 0)).unwrap()), "0:00:00");
}

#[test]
fn crud_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    add_material(&store, "slides-1", "Intro", "intro.pdf", b"%PDF", 0, MaterialCategory::Slides).unwrap();
    add_material(&store, "data-2", "Genome", "genome.fa", b">g\nATG", 2, MaterialCategory::Data).unwrap();
    let all = materials(&store).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(ids(&visible(&all, 1)), ["slides-1"]);
    assert!(remove_material(&store, "slides-1").unwrap());
    assert!(!remove_material(&store, "slides-1").unwrap());
    assert_eq!(ids(&materials(&store).unwrap()), ["data-2"]);
}

//! CSV ingestion and export.
//!
//! events.csv      `student_id,assignment_id,timestamp_hours`
//! assignments.csv `assignment_id,open_time_hours,deadline_scaled,label`
//! grades.csv      `student_id,assignment_id,grade`
//!
//! Timestamps and opening times are hours from course start; deadlines are
//! in scaled units (hours / s) from course start.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use super::{AssignmentSchedule, Dataset, EventSequence};
use crate::error::{Error, Result};

const EVENTS_HEADER: [&str; 3] = ["student_id", "assignment_id", "timestamp_hours"];
const ASSIGNMENTS_HEADER: [&str; 4] = ["assignment_id", "open_time_hours", "deadline_scaled", "label"];
const GRADES_HEADER: [&str; 3] = ["student_id", "assignment_id", "grade"];

fn open_reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let found: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != header {
        return Err(Error::row(
            path,
            1,
            format!("expected header `{}`, found `{}`", header.join(","), found.join(",")),
        ));
    }
    Ok(reader)
}

fn parse_number(path: &Path, line: usize, field: &str, raw: &str) -> Result<f64> {
    let value: f64 = raw
        .trim()
        .parse()
        .map_err(|_| Error::row(path, line, format!("{field} `{raw}` is not a number")))?;
    if !value.is_finite() {
        return Err(Error::row(path, line, format!("{field} `{raw}` is not finite")));
    }
    Ok(value)
}

fn line_of(record: &csv::StringRecord, fallback: usize) -> usize {
    record.position().map_or(fallback, |p| p.line() as usize)
}

fn read_assignments(path: &Path, s: f64) -> Result<Vec<AssignmentSchedule>> {
    let mut reader = open_reader(path, &ASSIGNMENTS_HEADER)?;
    let mut out: Vec<AssignmentSchedule> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = line_of(&record, idx + 2);
        if record.len() < 3 {
            return Err(Error::row(path, line, "expected at least 3 fields"));
        }
        let assignment_id = record[0].trim().to_string();
        if assignment_id.is_empty() {
            return Err(Error::row(path, line, "empty assignment_id"));
        }
        if out.iter().any(|a| a.assignment_id == assignment_id) {
            return Err(Error::row(path, line, format!("duplicate assignment `{assignment_id}`")));
        }
        let open_time = parse_number(path, line, "open_time_hours", &record[1])?;
        let deadline = parse_number(path, line, "deadline_scaled", &record[2])?;
        if open_time < 0.0 {
            return Err(Error::row(path, line, "open_time_hours is negative"));
        }
        if !(deadline * s > open_time) {
            return Err(Error::row(
                path,
                line,
                format!("deadline {deadline} (x s = {}) is not after opening {open_time}", deadline * s),
            ));
        }
        let label = record.get(3).map(str::trim).filter(|l| !l.is_empty()).map(String::from);
        out.push(AssignmentSchedule {
            assignment_id,
            open_time,
            deadline,
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::row(path, 1, "no assignments"));
    }
    Ok(out)
}

struct RawEvent {
    line: usize,
    student: usize,
    assignment: usize,
    time: f64,
}

fn read_events(
    path: &Path,
    students: &mut Vec<String>,
    student_index: &mut HashMap<String, usize>,
    assignment_index: &HashMap<String, usize>,
    assignments: &[AssignmentSchedule],
) -> Result<Vec<RawEvent>> {
    let mut reader = open_reader(path, &EVENTS_HEADER)?;
    let mut events = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = line_of(&record, idx + 2);
        if record.len() != 3 {
            return Err(Error::row(path, line, "expected 3 fields"));
        }
        let student_id = record[0].trim();
        if student_id.is_empty() {
            return Err(Error::row(path, line, "empty student_id"));
        }
        let assignment_id = record[1].trim();
        let &assignment = assignment_index
            .get(assignment_id)
            .ok_or_else(|| Error::row(path, line, format!("unknown assignment `{assignment_id}`")))?;
        let time = parse_number(path, line, "timestamp_hours", &record[2])?;
        if time < 0.0 {
            return Err(Error::row(path, line, "negative timestamp"));
        }
        if time < assignments[assignment].open_time {
            return Err(Error::row(
                path,
                line,
                format!(
                    "timestamp {time} precedes the opening of `{assignment_id}` at {}",
                    assignments[assignment].open_time
                ),
            ));
        }
        let student = *student_index.entry(student_id.to_string()).or_insert_with(|| {
            students.push(student_id.to_string());
            students.len() - 1
        });
        events.push(RawEvent {
            line,
            student,
            assignment,
            time,
        });
    }
    Ok(events)
}

fn group_events(
    path: &Path,
    events: Vec<RawEvent>,
    assignments: &[AssignmentSchedule],
    course_end: f64,
) -> Result<BTreeMap<(usize, usize), EventSequence>> {
    let mut grouped: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for ev in events {
        if ev.time > course_end {
            return Err(Error::row(
                path,
                ev.line,
                format!("timestamp {} is after the course end {course_end}", ev.time),
            ));
        }
        grouped.entry((ev.student, ev.assignment)).or_default().push(ev.time);
    }
    let mut sequences = BTreeMap::new();
    for ((i, j), mut times) in grouped {
        times.sort_by(f64::total_cmp);
        times.dedup();
        let seq = EventSequence::new(i, j, times, assignments[j].open_time, course_end)?;
        sequences.insert((i, j), seq);
    }
    Ok(sequences)
}

/// Reads a course from its CSV files.
///
/// Sequences come out sorted with duplicate timestamps collapsed; each
/// pair window runs from the assignment opening to the course end.
pub fn load_dataset(
    events_path: &Path,
    assignments_path: &Path,
    grades_path: Option<&Path>,
    s: f64,
    course_end: Option<f64>,
) -> Result<Dataset> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("time scale s must be positive, got {s}")));
    }
    let assignments = read_assignments(assignments_path, s)?;
    let assignment_index: HashMap<String, usize> = assignments
        .iter()
        .enumerate()
        .map(|(j, a)| (a.assignment_id.clone(), j))
        .collect();

    let mut students = Vec::new();
    let mut student_index = HashMap::new();
    let events = read_events(
        events_path,
        &mut students,
        &mut student_index,
        &assignment_index,
        &assignments,
    )?;

    let course_end = match course_end {
        Some(end) => end,
        None => events
            .iter()
            .map(|e| e.time)
            .chain(assignments.iter().map(|a| a.deadline * s))
            .fold(f64::NEG_INFINITY, f64::max),
    };
    if let Some(a) = assignments.iter().find(|a| !(course_end > a.open_time)) {
        return Err(Error::Data(format!(
            "course end {course_end} does not follow the opening of `{}`",
            a.assignment_id
        )));
    }
    let sequences = group_events(events_path, events, &assignments, course_end)?;

    let mut grades = BTreeMap::new();
    if let Some(path) = grades_path {
        let mut reader = open_reader(path, &GRADES_HEADER)?;
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            let line = line_of(&record, idx + 2);
            if record.len() != 3 {
                return Err(Error::row(path, line, "expected 3 fields"));
            }
            let student_id = record[0].trim();
            let assignment_id = record[1].trim();
            let &j = assignment_index
                .get(assignment_id)
                .ok_or_else(|| Error::row(path, line, format!("unknown assignment `{assignment_id}`")))?;
            let i = *student_index.entry(student_id.to_string()).or_insert_with(|| {
                students.push(student_id.to_string());
                students.len() - 1
            });
            let grade = parse_number(path, line, "grade", &record[2])?;
            grades.insert((i, j), grade);
        }
    }

    if students.is_empty() {
        return Err(Error::Data("no students found in the events or grades files".into()));
    }
    let dataset = Dataset {
        students,
        assignments,
        sequences,
        grades,
        course_end,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Reads extra sequences (e.g. held-out pairs) in the events.csv format,
/// resolving ids against `dataset`. Unknown students are appended to the
/// dataset's student list with no observed pairs.
pub fn read_sequences(path: &Path, dataset: &mut Dataset) -> Result<Vec<EventSequence>> {
    let assignment_index: HashMap<String, usize> = dataset
        .assignments
        .iter()
        .enumerate()
        .map(|(j, a)| (a.assignment_id.clone(), j))
        .collect();
    let mut student_index: HashMap<String, usize> = dataset
        .students
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    let events = read_events(
        path,
        &mut dataset.students,
        &mut student_index,
        &assignment_index,
        &dataset.assignments,
    )?;
    let grouped = group_events(path, events, &dataset.assignments, dataset.course_end)?;
    Ok(grouped.into_values().collect())
}

pub(crate) fn create(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

pub(crate) fn flush(mut writer: csv::Writer<File>, path: &Path) -> Result<()> {
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes sequences in the events.csv format, ordered by pair then time.
pub fn write_sequences<'a>(
    path: &Path,
    dataset: &Dataset,
    sequences: impl IntoIterator<Item = &'a EventSequence>,
) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(EVENTS_HEADER)?;
    for seq in sequences {
        let student = &dataset.students[seq.student];
        let assignment = &dataset.assignments[seq.assignment].assignment_id;
        for t in &seq.timestamps {
            w.write_record([student.as_str(), assignment.as_str(), &t.to_string()])?;
        }
    }
    flush(w, path)
}

/// Writes a dataset back to its CSV files. Grades are written only when a
/// path is given.
pub fn write_dataset(
    dataset: &Dataset,
    events_path: &Path,
    assignments_path: &Path,
    grades_path: Option<&Path>,
) -> Result<()> {
    write_sequences(events_path, dataset, dataset.sequences.values())?;

    let mut w = create(assignments_path)?;
    w.write_record(ASSIGNMENTS_HEADER)?;
    for a in &dataset.assignments {
        w.write_record([
            a.assignment_id.as_str(),
            &a.open_time.to_string(),
            &a.deadline.to_string(),
            a.label.as_deref().unwrap_or(""),
        ])?;
    }
    flush(w, assignments_path)?;

    if let Some(path) = grades_path {
        let mut w = create(path)?;
        w.write_record(GRADES_HEADER)?;
        for ((i, j), g) in &dataset.grades {
            w.write_record([
                dataset.students[*i].as_str(),
                dataset.assignments[*j].assignment_id.as_str(),
                &g.to_string(),
            ])?;
        }
        flush(w, path)?;
    }
    Ok(())
}

use std::path::Path;

use chiefray::artifacts::{parse_summary, read_summary, summary_rows, write_csv, SummaryRow};
use chiefray::calibrate::CalibrationResult;
use chiefray::optics::BenchConfig;

fn tables() -> Vec<SummaryRow> {
    read_summary(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/reference_tables.csv"))
        .unwrap()
}

fn find<'a>(rows: &'a [SummaryRow], table: &str, projector: &str, method: &str) -> &'a SummaryRow {
    rows.iter()
        .find(|r| r.table == table && r.projector == projector && r.method == method)
        .unwrap_or_else(|| panic!("no row {table}/{projector}/{method}"))
}

#[test]
fn near_condition_dlp1_row() {
    let rows = tables();
    let r = find(&rows, "1a", "DLP1", "proposed");
    assert_eq!(
        (r.fx, r.fy, r.cx, r.cy),
        (Some(2047.65), Some(2057.85), Some(404.29), Some(739.26))
    );
    assert_eq!(r.mrpe, Some(0.59));
    assert_eq!(find(&rows, "1a", "DLP1", "conventional").mrpe, Some(0.30));
    assert_eq!(find(&rows, "1a", "DLP2", "proposed").mrpe, Some(0.73));
    assert_eq!(find(&rows, "1a", "LCD", "conventional").fx, Some(3512.25));
}

#[test]
fn far_condition_keeps_missing_entries() {
    let rows = tables();
    let lcd = find(&rows, "1b", "LCD", "conventional");
    assert_eq!(
        (lcd.fx, lcd.fy, lcd.cx, lcd.cy, lcd.mrpe),
        (None, None, None, None, None)
    );
    let dlp1 = find(&rows, "1b", "DLP1", "proposed");
    assert_eq!(
        (dlp1.fx, dlp1.cy, dlp1.mrpe),
        (Some(2044.18), Some(778.79), Some(0.67))
    );
    assert_eq!(find(&rows, "1b", "LCD", "proposed").mrpe, Some(0.86));
}

#[test]
fn naive_comparison_table() {
    let rows = tables();
    let naive = find(&rows, "2", "DLP1", "proposed (naive)");
    assert_eq!(
        (naive.fx, naive.fy, naive.cx, naive.cy, naive.mrpe),
        (
            Some(2054.56),
            Some(2072.16),
            Some(375.78),
            Some(747.28),
            Some(1.32)
        )
    );
    // The comparison repeats the near-condition columns verbatim.
    for m in ["proposed", "conventional"] {
        let a = find(&rows, "2", "DLP1", m);
        let b = find(&rows, "1a", "DLP1", m);
        assert_eq!(
            (a.fx, a.fy, a.cx, a.cy, a.mrpe),
            (b.fx, b.fy, b.cx, b.cy, b.mrpe)
        );
    }
    assert!(naive.mrpe > find(&rows, "2", "DLP1", "proposed").mrpe);
}

#[test]
fn fixture_shape() {
    let rows = tables();
    assert_eq!(rows.len(), 15);
    assert_eq!(rows.iter().filter(|r| r.table == "1a").count(), 6);
    assert_eq!(rows.iter().filter(|r| r.table == "1b").count(), 6);
    assert!(rows.iter().all(|r| r.mrpe.is_none_or(|m| m < 1.5)));
}

#[test]
fn run_summary_round_trips_through_the_same_parser() {
    let bench = BenchConfig::default_bench();
    let report = CalibrationResult {
        fx: 1832.5,
        fy: 1833.25,
        cx: 409.0,
        cy: 420.125,
        mrpe_projector_px: 0.031,
        mrpe_scanner_px: 0.1,
        views: vec![],
        excluded: vec![],
        error_curve: vec![0.1],
    };
    let rows = summary_rows(&report, &bench, "proposed");
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("summary.csv");
    write_csv(&p, &rows).unwrap();
    assert_eq!(read_summary(&p).unwrap(), rows);
    assert_eq!(rows[1].mrpe, None);
    assert!((rows[1].fx.unwrap() - 1832.99389).abs() < 1e-4);
}

#[test]
fn malformed_table_is_a_format_error() {
    let e = parse_summary(
        "table,projector,condition,method,fx,fy,cx,cy,mrpe\n1a,X,near,p,abc,1,1,1,1\n",
    )
    .unwrap_err();
    assert_eq!(e.code(), "format");
}

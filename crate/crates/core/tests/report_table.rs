mod common;

use common::{write_table, DATASETS, TABLE};
use softsil::trainer::report::{aggregate, fmt4, load_summaries, report_csv};

/// Plain column mean, written without the aggregation code.
fn column_mean(xs: &[f64; 7]) -> f64 {
    let mut total = 0.0;
    for x in xs {
        total += x;
    }
    total / 7.0
}

fn all_rows() -> Vec<softsil::trainer::report::ReportRow> {
    let dir = tempfile::tempdir().unwrap();
    let objectives: Vec<&str> = TABLE.iter().map(|c| c.objective).collect();
    write_table(dir.path(), &objectives);
    aggregate(&load_summaries(&[dir.path().to_path_buf()]).unwrap()).unwrap()
}

#[test]
fn every_column_matches_a_plain_mean() {
    let rows = all_rows();
    assert_eq!(rows.len(), TABLE.len());
    for (row, col) in rows.iter().zip(TABLE.iter()) {
        assert_eq!(row.objective, col.objective);
        assert_eq!((row.runs, row.datasets), (DATASETS.len(), DATASETS.len()));
        assert!(
            (row.top1 - column_mean(&col.top1)).abs() < 1e-15,
            "{}",
            col.objective
        );
        match (row.top5, col.top5) {
            (Some(r), Some(c)) => assert!((r - column_mean(&c)).abs() < 1e-15, "{}", col.objective),
            (None, None) => {}
            other => panic!("{}: top5 {other:?}", col.objective),
        }
    }
}

#[test]
fn ce_and_combined_columns_reproduce_the_printed_average() {
    let dir = tempfile::tempdir().unwrap();
    write_table(dir.path(), &["CE", "CE+SIL+SupCon2"]);
    let csv =
        report_csv(&aggregate(&load_summaries(&[dir.path().to_path_buf()]).unwrap()).unwrap());
    assert_eq!(
        csv,
        "objective,runs,datasets,top1,top5\nCE,7,7,0.3671,0.5844\nCE+SIL+SupCon2,7,7,0.3908,0.5986\n"
    );
}

#[test]
fn printed_average_row_differs_only_in_three_cells() {
    // The published averages for Center (both columns) and the combined
    // objective's top-5 do not equal the means of their own columns.
    let mut mismatches = Vec::new();
    for (row, col) in all_rows().iter().zip(TABLE.iter()) {
        if fmt4(Some(row.top1)) != fmt4(Some(col.avg_top1)) {
            mismatches.push(format!(
                "{} top1 {} vs {}",
                col.objective,
                fmt4(Some(row.top1)),
                col.avg_top1
            ));
        }
        if fmt4(row.top5) != fmt4(col.avg_top5) {
            mismatches.push(format!(
                "{} top5 {} vs {:?}",
                col.objective,
                fmt4(row.top5),
                col.avg_top5
            ));
        }
    }
    assert_eq!(
        mismatches,
        vec![
            "CE+SIL+SupCon2 top5 0.5986 vs Some(0.598)",
            "Center top1 0.3462 vs 0.332",
            "Center top5 0.5584 vs Some(0.558)",
        ]
    );
}

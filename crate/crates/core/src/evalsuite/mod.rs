//! Segmentation metrics, ablation grids and report files.

mod ablation;
mod metrics;
mod report;

pub use ablation::{
    comparison_rows, comparison_specs, coverage_sweep_specs, decoder_ablation_specs, mean_std, run_baseline_comparison,
    run_cell, run_cells, run_coverage_sweep, run_decoder_ablation, AblationGrid, AggregateRow, CellResult, CellSpec,
    ComparisonRow, Experiment, BASELINES, DEFAULT_COVERAGES, DEFAULT_DECODER_COUNTS, DEFAULT_LAMBDA_GRID,
};
pub use metrics::{
    evaluate, evaluate_labeled_accuracy, labeled_accuracy, miou, model_input, EvalResult, ImageScore, IouScores,
};
pub use report::{
    ablation_rows, emit_report, plot_loss_curves, plot_miou_vs_coverage, plot_miou_vs_decoders, read_ablation_csv,
    read_comparison_csv, write_ablation_csv, write_comparison_csv, AblationRow, Curve, PlotKind, ABLATION_HEADER,
    COMPARISON_HEADER,
};

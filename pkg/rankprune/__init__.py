from rankprune.data_model import Candidate, QueryRecord, Dataset, Threshold, RiskCurve, CalibrationResult, \
    TrialReport, prune, rerank
from rankprune.ingest import parse_run, parse_qrels, build_dataset, fit_platt, fuse, search_beta, fit_system, \
    apply_system
from rankprune.calibrate import GridConfig, risk_curve, select_threshold, correct_risk, correct_confidence, calibrate
from rankprune.evaluate import TrialConfig, evaluate_test, run_trials, compare_methods, tradeoff, confidence_sweep
from rankprune.synthetic import SynthConfig, generate, true_risk

from .fetch import fetch_omni
from .pipeline import (
    Chunk,
    CleaningReport,
    DatasetSplit,
    LabeledRecord,
    LabeledSet,
    NormalizationStats,
    chronological_split,
    clean_missing,
    fold_bounds,
    fraction_split,
    kfold_splits,
    label_records,
    make_sequences,
    standardize,
    write_labeled_csv,
)
from .synth import iter_synthetic, synthesize_records, write_synthetic_csv
from .tables import (
    COLUMNS,
    CSV_HEADER,
    FEATURES,
    SolarWindRecord,
    SolarWindTable,
    load_column_map,
    load_table,
    parse_omni_table,
    read_csv_table,
    table_from_records,
    write_table_csv,
)


def sample_path():
    """Path to the bundled OMNI-format sample file."""
    from importlib import resources

    return resources.files("dstt.data").joinpath("omni2_sample.dat")

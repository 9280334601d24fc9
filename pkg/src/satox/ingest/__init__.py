"""Contamination series and satellite patch preparation."""

from .archive import ArchiveError, read_patch_archive, write_patch_archive
from .contamination import (
    REGULATORY_LIMIT,
    AreaSeries,
    ContaminationFormatError,
    ContaminationRecord,
    EmptySeriesError,
    build_weekly_series,
    impute_forward_fill,
    parse_contamination_csv,
    series_summary,
    write_contamination_csv,
)
from .frames import (
    FLAG_CLOUD,
    FLAG_LAND,
    FLAG_RANGE_FAIL,
    INVALID_BITS,
    Frame,
    FrameSelection,
    GeoTransform,
    LocalProjection,
    PatchDiscarded,
    SatellitePatch,
    compute_valid_mask,
    extract_patch,
    frame_coverage,
    load_frames,
    read_sites_csv,
    save_frames,
    select_frames,
    target_area,
    write_sites_csv,
)

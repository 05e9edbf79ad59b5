import numpy as np
import pandas as pd


def mean_with_error(values, tag=None):
    """mean of the finite entries of ``values`` as a ufloat carrying its standard error"""
    from uncertainties import ufloat

    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return ufloat(np.nan, np.nan, tag=tag)
    sem = finite.std(ddof=1) / np.sqrt(finite.size) if finite.size > 1 else 0.0
    return ufloat(finite.mean(), sem, tag=tag)


def cast_columns_to_ufloat(frame: pd.DataFrame, columns=None):
    u = {}

    for col in columns if columns is not None else frame.columns:
        if pd.api.types.is_numeric_dtype(frame[col]):
            u[col] = mean_with_error(frame[col].to_numpy(), tag=col)
    return u

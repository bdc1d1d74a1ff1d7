import numpy as np


def absolute_errors(preds, labels) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        preds = preds.reshape(labels.shape)
    return np.abs(preds - labels).reshape(len(labels), -1).mean(axis=1) if labels.ndim > 1 \
        else np.abs(preds - labels)


def mae(preds, labels) -> float:
    err = absolute_errors(preds, labels)
    if err.size == 0:
        raise ValueError("MAE of an empty set is undefined")
    return float(err.mean())


def cumulative_score(errors, threshold: float = 5.0, inclusive: bool = True) -> float:
    """Fraction of absolute errors within ``threshold`` (``<=`` unless ``inclusive=False``)."""
    err = np.abs(np.asarray(errors, dtype=np.float64)).reshape(-1)
    if err.size == 0:
        raise ValueError("CS of an empty set is undefined")
    hits = err <= threshold if inclusive else err < threshold
    return float(hits.mean())

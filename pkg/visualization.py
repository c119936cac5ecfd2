"""
Sweep plots: mAP against query depth k_q per pipeline mode, and postings
count against the per-document keep level of a pruned index.
"""

import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

logger = logging.getLogger(__name__)


def plot_sweep(df: pd.DataFrame, out_path: str, title: str = "mAP vs k_q") -> str:
    """One line per (mode, prune_query) combination; rSTR also draws its exact-scan mAP."""
    plt.figure(figsize=(6, 4.5))
    for (mode, prune), group in df.groupby(["mode", "prune_query"], sort=False):
        group = group.sort_values("k_q")
        label = mode if prune == "" else f"{mode} (keep {prune})"
        plt.plot(group["k_q"], group["mAP"], marker="o", label=label)
    if "exact_mAP" in df and df["exact_mAP"].notna().any():
        plt.axhline(df["exact_mAP"].dropna().iloc[0], color="grey", linestyle="--", label="sequential scan")
    plt.xlabel("k_q")
    plt.ylabel("mAP")
    plt.ylim(0, 1.0)
    plt.title(title)
    plt.legend()
    plt.tight_layout()
    plt.savefig(out_path, dpi=150)
    plt.close()
    logger.info("Wrote sweep plot to %s", out_path)
    return out_path


def plot_space(keeps, postings, out_path: str, title: str = "postings vs keep") -> str:
    plt.figure(figsize=(6, 4))
    plt.plot(list(keeps), list(postings), marker="s")
    plt.xlabel("terms kept per document")
    plt.ylabel("postings")
    plt.title(title)
    plt.tight_layout()
    plt.savefig(out_path, dpi=150)
    plt.close()
    logger.info("Wrote space plot to %s", out_path)
    return out_path

"""
Figures for finished runs: loss curves, the ablation bar chart and a preview
of synthesized defects.
"""
import glob
import logging
import os
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from src.synthworld import render_scene, sample_mask_for, sample_seeds, stack_images  # noqa: E402
from src.tensorcore import Tensor  # noqa: E402

logger = logging.getLogger(__name__)

sns.set(style="whitegrid")

SMOOTHING_WINDOW = 25


def plot_loss_curves(csv_path: str, out_path: Optional[str] = None) -> str:
    """
    Plot every loss column of a per-step loss CSV, smoothed with a rolling mean.

    Args:
        csv_path (str): A *_losses.csv written by the pipeline.
        out_path (str): Target PNG; defaults to the CSV path with .png.

    Returns:
        str: Path of the written figure.
    """
    df = pd.read_csv(csv_path)
    out_path = out_path or os.path.splitext(csv_path)[0] + ".png"
    columns = [c for c in df.columns if c != "step" and df[c].notna().any()]
    long = df.melt(id_vars="step", value_vars=columns, var_name="loss", value_name="value").dropna()
    long["smoothed"] = long.groupby("loss")["value"].transform(
        lambda s: s.rolling(SMOOTHING_WINDOW, min_periods=1).mean())

    plt.figure(figsize=(10, 6))
    sns.lineplot(data=long, x="step", y="smoothed", hue="loss")
    plt.title(os.path.basename(csv_path))
    plt.ylabel(f"loss (rolling mean, {SMOOTHING_WINDOW} steps)")
    plt.savefig(out_path)
    plt.close()
    return out_path


def plot_ablation(csv_path: str, out_path: Optional[str] = None) -> str:
    df = pd.read_csv(csv_path)
    out_path = out_path or os.path.splitext(csv_path)[0] + ".png"
    plt.figure(figsize=(8, 5))
    sns.barplot(data=df, x="configuration", y="test_f1", errorbar="sd", order=sorted(df["configuration"].unique()))
    sns.stripplot(data=df, x="configuration", y="test_f1", color="black", size=4,
                  order=sorted(df["configuration"].unique()))
    plt.title("Test F1 per configuration (mean ± sd over seeds)")
    plt.ylim(0, 1)
    plt.savefig(out_path)
    plt.close()
    return out_path


def plot_run(run_dir: str) -> List[str]:
    """Render every loss CSV and ablation table found under a run directory."""
    written = []
    for path in sorted(glob.glob(os.path.join(run_dir, "**", "*_losses.csv"), recursive=True)):
        written.append(plot_loss_curves(path))
    ablation = os.path.join(run_dir, "ablation.csv")
    if os.path.exists(ablation):
        written.append(plot_ablation(ablation))
    logger.info("Wrote %d figures under %s", len(written), run_dir)
    return written


def _crop_window(box, size: int, margin: float = 4.0):
    x0 = int(max(0, np.floor(box.x_min - margin)))
    y0 = int(max(0, np.floor(box.y_min - margin)))
    x1 = int(min(size, np.ceil(box.x_max + margin)))
    y1 = int(min(size, np.ceil(box.y_max + margin)))
    return slice(y0, y1), slice(x0, x1)


def synthesis_preview(config, generators: Dict[str, object], out_path: str, seed: int = 0, n: int = 4) -> str:
    """
    Side-by-side synthesized defects from several generators on the same
    clean scenes and masks, with the first mask region enlarged.

    Args:
        config (TrainConfig): Supplies world settings.
        generators (dict): Label -> GeneratorNet.
        out_path (str): Target PNG.
        seed (int): Scene and mask seed.
        n (int): Number of example scenes.
    """
    world = config.world
    scene_seeds = sample_seeds(seed, n)
    scenes = [render_scene(s, False, world) for s in scene_seeds]
    masks = [sample_mask_for(scene, world, s + 1) for scene, s in zip(scenes, scene_seeds)]
    images = stack_images(scenes)
    channels = Tensor(np.stack([m.channels.data for m in masks]), copy=False)
    outputs = {label: g(images, channels).data for label, g in generators.items()}

    columns = 1 + 2 * len(outputs)
    fig, axes = plt.subplots(n, columns, figsize=(2.2 * columns, 2.2 * n), squeeze=False)
    for row, (scene, mask) in enumerate(zip(scenes, masks)):
        panels = [("clean", scene.image.data, False)]
        for label, out in outputs.items():
            panels.append((label, out[row], False))
            panels.append((f"{label} (zoom)", out[row], True))
        window = _crop_window(mask.boxes[0][0], world.image_size) if mask.boxes else None
        for col, (title, image, zoomed) in enumerate(panels):
            ax = axes[row, col]
            pixels = np.clip(image.transpose(1, 2, 0), 0, 1)
            if zoomed and window is not None:
                pixels = pixels[window]
            ax.imshow(pixels, interpolation="nearest")
            if not zoomed:
                for box, _ in mask.boxes:
                    ax.add_patch(mpatches.Rectangle((box.x_min, box.y_min), box.width, box.height,
                                                    fill=False, edgecolor="yellow", linewidth=0.8))
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    logger.info("Synthesis preview written to %s", out_path)
    return out_path

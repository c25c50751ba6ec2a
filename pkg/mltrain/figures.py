import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

# colors of the two methods
SINGLE_COLOR = 'tab:blue'
MULTILEVEL_COLOR = 'tab:red'


def _curve(ax, x, summary, color, label):
    mean = np.asarray(summary['loss_mean'], dtype=np.float64)
    std = np.asarray(summary['loss_std'], dtype=np.float64)
    ax.plot(x, mean, color=color, label=label)
    # lighter band: one standard deviation across seeds
    ax.fill_between(x, mean - std, mean + std, color=color, alpha=0.25, linewidth=0)


# training loss against fine-level optimization steps
def figure_loss_vs_steps(baseline, multilevel, out_dir):
    fig, ax = plt.subplots(1, 1)
    _curve(ax, baseline['step'], baseline, SINGLE_COLOR, 'single level')
    _curve(ax, multilevel['step'], multilevel, MULTILEVEL_COLOR, 'multilevel')
    ax.set_xlabel('optimization steps (fine level)')
    ax.set_ylabel('training loss')
    ax.legend()
    path = os.path.join(out_dir, 'loss_vs_steps.png')
    plt.savefig(path)
    plt.close(fig)
    return path


# training loss against cumulative FLOPs, coarse steps included
def figure_loss_vs_flops(baseline, multilevel, out_dir):
    fig, ax = plt.subplots(1, 1)
    _curve(ax, np.asarray(baseline['flops_mean'], dtype=np.float64), baseline, SINGLE_COLOR, 'single level')
    _curve(ax, np.asarray(multilevel['flops_mean'], dtype=np.float64), multilevel, MULTILEVEL_COLOR, 'multilevel')
    ax.set_xlabel('FLOPs')
    ax.set_ylabel('training loss')
    ax.legend()
    path = os.path.join(out_dir, 'loss_vs_flops.png')
    plt.savefig(path)
    plt.close(fig)
    return path


def plot_comparison(baseline, multilevel, out_dir):
    return [figure_loss_vs_steps(baseline, multilevel, out_dir),
            figure_loss_vs_flops(baseline, multilevel, out_dir)]

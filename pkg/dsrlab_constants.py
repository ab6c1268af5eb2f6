#!/usr/bin/env python3
"""
DSRLab Constants Module

This module contains the constants shared by the data generator, the
networks, the trainer and the CLI, organized into logical classes.
"""


class TrainModes:
    """Training modes and the loss terms they enable"""
    TEACHER_FULL = "teacher-full"
    TEACHER_REC_DEP = "teacher-rec-dep"      # "DSRNet+": L_rec and L_dep only
    TEACHER_REC_ONLY = "teacher-rec-only"
    TEACHER_DEPTH_GT = "teacher-depth-gt"
    STUDENT_PLAIN = "student-plain"
    STUDENT_KD = "student-kd"
    STUDENT_AD = "student-ad"
    STUDENT_DISTILL = "student-distill"

    TEACHER = (TEACHER_FULL, TEACHER_REC_DEP, TEACHER_REC_ONLY, TEACHER_DEPTH_GT)
    STUDENT = (STUDENT_PLAIN, STUDENT_KD, STUDENT_AD, STUDENT_DISTILL)
    ALL = TEACHER + STUDENT


class DepthSources:
    """Where the DMM gets its depth maps from"""
    NET = "net"
    GT = "gt"
    NONE = "none"

    ALL = (NET, GT, NONE)


# mode -> (depth source, active teacher loss terms)
TEACHER_MODE_TABLE = {
    TrainModes.TEACHER_FULL: (DepthSources.NET, ("dep", "rec", "per", "adv")),
    TrainModes.TEACHER_REC_DEP: (DepthSources.NET, ("dep", "rec")),
    TrainModes.TEACHER_REC_ONLY: (DepthSources.NONE, ("rec",)),
    TrainModes.TEACHER_DEPTH_GT: (DepthSources.GT, ("rec",)),
}

# mode -> active student loss terms
STUDENT_MODE_TABLE = {
    TrainModes.STUDENT_PLAIN: ("rec",),
    TrainModes.STUDENT_KD: ("rec", "kd"),
    TrainModes.STUDENT_AD: ("rec", "ad"),
    TrainModes.STUDENT_DISTILL: ("rec", "kd", "ad"),
}


class DatasetFiles:
    """File names of the on-disk dataset layout"""
    MANIFEST = "manifest.json"
    SAMPLES_DIR = "samples"
    HR = "hr.png"
    REF = "ref.png"
    LR = "lr.png"
    REF_LR = "ref_lr.png"
    DEPTH_LR = "depth_lr.f32"
    DEPTH_REF_LR = "depth_reflr.f32"
    META = "meta.json"

    IMAGES = (HR, REF, LR, REF_LR)
    DEPTHS = (DEPTH_LR, DEPTH_REF_LR)


class CheckpointFiles:
    """File names of a checkpoint directory"""
    WEIGHTS = "weights.bin"
    ARCH = "arch.json"
    META = "meta.json"
    LAST_GOOD = "last_good"
    FINAL = "final"


class RunFiles:
    """File names written into a command's output directory"""
    # commands without --out write to runs/<command> under the working directory
    DEFAULT_OUT_ROOT = "runs"
    TRAIN_LOG = "train_log.csv"
    RESOLVED_CONFIG = "resolved_config.json"
    PROVENANCE = "provenance.json"
    REPORT_JSON = "report.json"
    REPORT_CSV = "report.csv"
    REPORT_HTML = "report.html"
    ABLATION_JSON = "ablation.json"
    ABLATION_CSV = "ablation.csv"
    ABLATION_HTML = "ablation.html"
    BENCH_JSON = "bench.json"
    BENCH_CSV = "bench.csv"


class Defaults:
    """Resolution and numeric defaults (sizes are height x width)"""
    SCALE = 4
    HR_SIZE = (448, 320)
    LR_SIZE = (112, 80)
    FLOPS_INPUT = (128, 128)
    CAMERA_STEP = 0.15           # meters along the pipe axis
    FAR_CLIP = 8.0               # meters
    BICUBIC_A = -0.5
    LOG_CLAMP = 1e-7
    MATCH_EPS = 1e-12


class EnvVars:
    """Environment variables read by the package"""
    CACHE = "DSRLAB_CACHE"
    RUN_SLOW = "DSRLAB_RUN_SLOW"
    RUN_ACCEPTANCE = "DSRLAB_RUN_ACCEPTANCE"


class Vgg19Weights:
    """Location of the torchvision VGG19 ImageNet weights"""
    URL = "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth"
    FILE_NAME = "vgg19-dcbb9e9d.pth"
    HASH_PREFIX = "dcbb9e9d"
    # index of the last module kept in vgg19().features for each tap
    TAPS = {
        "relu1_2": 3,
        "relu2_2": 8,
        "relu3_4": 17,
        "relu4_4": 26,
        "relu5_4": 35,
    }


VERSION = "0.3.0"

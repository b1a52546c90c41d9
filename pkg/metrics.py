"""Print aggregate dashboards from the run registry."""
import argparse
import os
import sys
from datetime import datetime
from pathlib import Path

from dotenv import load_dotenv
from sqlalchemy import func

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.db.models import CheckpointScore, SeparationRun, default_registry_url, get_session_maker, init_db

load_dotenv()


def get_db_session(workdir):
    """Get database session."""
    db_url = os.getenv("CONDEEPMOD_REGISTRY_URL") or default_registry_url(workdir)
    engine = init_db(db_url)
    SessionMaker = get_session_maker(engine)
    return SessionMaker()


def print_section(title):
    """Print section header."""
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70)


def _fmt(value, spec=".2f"):
    return "n/a" if value is None else format(value, spec)


def get_overall_metrics(session):
    """Means over every evaluated mixture."""
    count, si_snri, sdri, purity, conductance, modularity = session.query(
        func.count(SeparationRun.id),
        func.avg(SeparationRun.si_snri),
        func.avg(SeparationRun.sdri),
        func.avg(SeparationRun.purity),
        func.avg(SeparationRun.conductance),
        func.avg(SeparationRun.modularity),
    ).one()

    print_section("OVERALL SEPARATION")
    print(f"Evaluated mixtures: {count}")
    if not count:
        print("  No runs recorded yet!")
        return
    print(f"  SI-SNRi: {_fmt(si_snri)} dB")
    print(f"  SDRi:    {_fmt(sdri)} dB")
    print(f"  Purity:  {_fmt(purity, '.3f')}")
    print(f"  C: {_fmt(conductance)}  Q: {_fmt(modularity)}")


def get_speaker_count_metrics(session):
    """Breakdown by number of sources per mixture."""
    rows = session.query(
        SeparationRun.n_sources,
        func.count(SeparationRun.id),
        func.avg(SeparationRun.si_snri),
        func.avg(SeparationRun.purity),
        func.avg(SeparationRun.k_eff),
    ).group_by(SeparationRun.n_sources).order_by(SeparationRun.n_sources).all()

    print_section("BY SPEAKER COUNT")
    if not rows:
        print("  No runs recorded yet!")
        return
    for n_sources, count, si_snri, purity, k_eff in rows:
        print(f"  {n_sources} speakers: {count} mixtures | SI-SNRi {_fmt(si_snri)} dB | "
              f"purity {_fmt(purity, '.3f')} | mean k_eff {_fmt(k_eff, '.1f')}")


def get_head_metrics(session):
    """Breakdown by head kind and training mode."""
    rows = session.query(
        SeparationRun.head_kind,
        SeparationRun.head_mode,
        func.count(SeparationRun.id),
        func.avg(SeparationRun.si_snri),
        func.avg(SeparationRun.conductance),
        func.avg(SeparationRun.modularity),
    ).group_by(SeparationRun.head_kind, SeparationRun.head_mode).all()

    print_section("BY HEAD")
    for kind, mode, count, si_snri, conductance, modularity in rows:
        print(f"  {kind}/{mode}: {count} mixtures | SI-SNRi {_fmt(si_snri)} dB | "
              f"C {_fmt(conductance)} | Q {_fmt(modularity)}")


def get_checkpoint_trend(session):
    """Latest trend-report rows, ordered by step."""
    latest = session.query(func.max(CheckpointScore.created_at)).scalar()
    print_section("CHECKPOINT TREND")
    if latest is None:
        print("  No trend report recorded yet!")
        return
    run_seed = session.query(CheckpointScore.run_seed).filter(CheckpointScore.created_at == latest).first()[0]
    rows = session.query(CheckpointScore).filter(
        CheckpointScore.run_seed == run_seed
    ).order_by(CheckpointScore.step, CheckpointScore.created_at.desc()).all()

    seen = set()
    print(f"  {'step':>8}  {'loss':>8}  {'C':>7}  {'Q':>7}")
    for row in rows:
        if row.step in seen:
            continue
        seen.add(row.step)
        print(f"  {row.step:>8}  {row.loss:>8.4f}  {_fmt(row.conductance):>7}  {_fmt(row.modularity):>7}")


def get_recent_runs(session, limit=10):
    """Most recently evaluated mixtures."""
    runs = session.query(SeparationRun).order_by(SeparationRun.created_at.desc()).limit(limit).all()

    print_section(f"RECENT {limit} RUNS")
    if not runs:
        print("  No runs recorded yet!")
        return
    for i, run in enumerate(runs, 1):
        print(f"  {i}. {run.created_at.strftime('%Y-%m-%d %H:%M')} {run.mix_id} "
              f"(seed {run.run_seed}, {run.head_kind}/{run.head_mode}, theta={run.theta})")
        print(f"     k_eff={run.k_eff} | SI-SNRi {run.si_snri:.2f} dB | SDRi {run.sdri:.2f} dB | "
              f"purity {_fmt(run.purity, '.3f')}")


def main(argv=None):
    """Generate all registry reports."""
    parser = argparse.ArgumentParser(description="Separation run registry dashboard")
    parser.add_argument("--workdir", type=Path, default=Path("work"))
    parser.add_argument("--limit", type=int, default=10)
    args = parser.parse_args(argv)

    print("\n" + "=" * 70)
    print("  CONDEEPMOD - RUN REGISTRY DASHBOARD")
    print("=" * 70)
    print(f"  Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    session = get_db_session(args.workdir)

    try:
        get_overall_metrics(session)
        get_speaker_count_metrics(session)
        get_head_metrics(session)
        get_checkpoint_trend(session)
        get_recent_runs(session, limit=args.limit)

        print("\n" + "=" * 70)
        print("  Report Complete!")
        print("=" * 70 + "\n")

    finally:
        session.close()


if __name__ == "__main__":
    main()

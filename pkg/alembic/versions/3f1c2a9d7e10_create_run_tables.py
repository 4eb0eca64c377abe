"""Create run, global update and episode record tables

Revision ID: 3f1c2a9d7e10
Revises:
Create Date: 2026-10-17 09:12:44.512083

"""
from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision = '3f1c2a9d7e10'
down_revision = None
branch_labels = None
depends_on = None


def upgrade() -> None:
    op.create_table(
        'runs',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('created_at', sa.DateTime(), nullable=True),
        sa.Column('updated_at', sa.DateTime(), nullable=True),
        sa.Column('run_id', sa.String(length=32), nullable=False),
        sa.Column('command', sa.String(length=50), nullable=False),
        sa.Column('seed', sa.Integer(), nullable=False),
        sa.Column('strategy', sa.String(length=20), nullable=False),
        sa.Column('status', sa.String(), nullable=False),
        sa.Column('out_dir', sa.Text(), nullable=True),
        sa.Column('config', sa.JSON(), nullable=False),
        sa.Column('target_all', sa.Float(), nullable=True),
        sa.Column('target_old', sa.Float(), nullable=True),
        sa.Column('target_new', sa.Float(), nullable=True),
        sa.Column('k_used', sa.Integer(), nullable=True),
        sa.Column('wall_clock_seconds', sa.Float(), nullable=False),
        sa.CheckConstraint("status IN ('completed', 'failed')", name='check_valid_run_status'),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_runs_id'), 'runs', ['id'], unique=False)
    op.create_index(op.f('ix_runs_run_id'), 'runs', ['run_id'], unique=False)

    op.create_table(
        'global_updates',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('created_at', sa.DateTime(), nullable=True),
        sa.Column('updated_at', sa.DateTime(), nullable=True),
        sa.Column('run_id', sa.Integer(), nullable=False),
        sa.Column('global_index', sa.Integer(), nullable=False),
        sa.Column('strategy', sa.String(length=20), nullable=False),
        sa.Column('weight_diff_l1', sa.Float(), nullable=False),
        sa.Column('sign_conflict', sa.Float(), nullable=True),
        sa.Column('weights', sa.JSON(), nullable=False),
        sa.ForeignKeyConstraint(['run_id'], ['runs.id'], ),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_global_updates_id'), 'global_updates', ['id'], unique=False)

    op.create_table(
        'episode_records',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('created_at', sa.DateTime(), nullable=True),
        sa.Column('updated_at', sa.DateTime(), nullable=True),
        sa.Column('update_id', sa.Integer(), nullable=False),
        sa.Column('episode_index', sa.Integer(), nullable=False),
        sa.Column('domain_id', sa.String(length=50), nullable=True),
        sa.Column('known_classes', sa.JSON(), nullable=False),
        sa.Column('valid_all', sa.Float(), nullable=True),
        sa.Column('valid_old', sa.Float(), nullable=True),
        sa.Column('valid_new', sa.Float(), nullable=True),
        sa.Column('weight', sa.Float(), nullable=False),
        sa.Column('aborted', sa.Boolean(), nullable=False),
        sa.ForeignKeyConstraint(['update_id'], ['global_updates.id'], ),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_episode_records_id'), 'episode_records', ['id'], unique=False)


def downgrade() -> None:
    op.drop_index(op.f('ix_episode_records_id'), table_name='episode_records')
    op.drop_table('episode_records')
    op.drop_index(op.f('ix_global_updates_id'), table_name='global_updates')
    op.drop_table('global_updates')
    op.drop_index(op.f('ix_runs_run_id'), table_name='runs')
    op.drop_index(op.f('ix_runs_id'), table_name='runs')
    op.drop_table('runs')

// Wire types, mirroring the annotation service JSON bodies verbatim.

export interface CandidateTile {
  candidate_id: string;
  restored_image_ref: string;
  caption_preview: string;
  effective_token_length: number;
}

export interface AnnotationTask {
  pair_id: string;
  lq_thumbnail_ref: string;
  candidates: CandidateTile[];
  status: 'pending' | 'done';
}

export interface AnnotationSubmit {
  pair_id: string;
  candidate_id: string;
  annotator: string;
  force?: boolean;
}

export interface AnnotationAck {
  status: string;
  pair_id: string;
  candidate_id: string;
  queue_depth: number;
}

export interface LevelProgress {
  pending: number;
  done: number;
}

export interface Progress {
  pending: number;
  done: number;
  per_level: Record<string, LevelProgress>;
}

export interface UiConfig {
  api_base: string;
}

export interface ErrorBody {
  error: string;
  kind: string;
}

import type { ViewTransform } from './zoom.js';

/** A task as the UI holds it: server fields plus client view state. */
export interface TaskView {
  task: AnnotationTask;
  /** index into task.candidates, or null while nothing is highlighted */
  highlighted: number | null;
  /** one shared transform keeps every tile's zoom and pan in lockstep */
  view: ViewTransform;
}

/** Candidates sorted ascending by token length; the grid renders this order. */
export function toTaskView(task: AnnotationTask): TaskView {
  const candidates = [...task.candidates].sort(
    (a, b) => a.effective_token_length - b.effective_token_length,
  );
  return {
    task: { ...task, candidates },
    highlighted: null,
    view: { scale: 1, x: 0, y: 0 },
  };
}

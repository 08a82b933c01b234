// The UI state machine. Exactly five states; every (state, event) pair is
// either in the table below or an error, so an unexpected flow fails loudly
// instead of wedging a leased task.

export type UiState = 'loading' | 'reviewing' | 'submitting' | 'done' | 'error';

export type UiEvent =
  | 'taskLoaded'
  | 'queueEmpty'
  | 'loadFailed'
  | 'confirm'
  | 'submitOk'
  | 'submitStale'
  | 'submitFailed'
  | 'retry'
  | 'recheck';

export class StateFlowError extends Error {
  constructor(state: UiState, event: UiEvent) {
    super(`event '${event}' is not legal in state '${state}'`);
    this.name = 'StateFlowError';
  }
}

const TRANSITIONS: Record<UiState, Partial<Record<UiEvent, UiState>>> = {
  loading: {
    taskLoaded: 'reviewing',
    queueEmpty: 'done',
    loadFailed: 'error',
  },
  reviewing: {
    // confirm is the only way a selection leaves the client
    confirm: 'submitting',
  },
  submitting: {
    submitOk: 'loading',
    // the lease moved on; drop the stale task and fetch a fresh one
    submitStale: 'loading',
    // server hiccup: back to reviewing with the choice preserved
    submitFailed: 'reviewing',
  },
  done: {
    recheck: 'loading',
  },
  error: {
    retry: 'loading',
  },
};

export class TaskFlow {
  private current: UiState = 'loading';

  get state(): UiState {
    return this.current;
  }

  can(event: UiEvent): boolean {
    return TRANSITIONS[this.current][event] !== undefined;
  }

  /** Single in-flight mutation: a confirm is only legal while reviewing. */
  transition(event: UiEvent): UiState {
    const next = TRANSITIONS[this.current][event];
    if (next === undefined) {
      throw new StateFlowError(this.current, event);
    }
    this.current = next;
    return next;
  }
}

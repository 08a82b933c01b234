// The annotation review app: one task at a time, LQ plus candidate tiles in
// a synchronized-zoom grid, keyboard-first selection (digits highlight,
// Enter confirms), auto-advance on ack.

import { ApiClient, ApiError, TransportError } from './api.js';
import { TaskFlow, type UiState } from './state.js';
import type { TaskView } from './types.js';
import { toTaskView } from './types.js';
import { cssTransform, IDENTITY, pan, zoomAt, type ViewTransform } from './zoom.js';

const WHEEL_STEP = 1.2;

export class AnnotationApp {
  readonly flow = new TaskFlow();
  private view: TaskView | null = null;

  private grid: HTMLElement;
  private banner: HTMLElement;
  private bannerRetry: HTMLButtonElement;
  private doneScreen: HTMLElement;
  private toast: HTMLElement;
  private toastMessage: HTMLElement;
  private toastRetry: HTMLButtonElement;
  private progressFill: HTMLElement;
  private progressText: HTMLElement;

  private dragging = false;
  private dragX = 0;
  private dragY = 0;

  private pendingOps = 0;
  private idleWaiters: Array<() => void> = [];

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient,
    private readonly annotator: string,
    private readonly doc: Document = document,
  ) {
    this.root.innerHTML = '';
    this.root.classList.add('annotation-app');

    const header = this.el('header', 'app-header');
    const progressWrap = this.el('div', 'progress-wrap');
    this.progressFill = this.el('div', 'progress-fill');
    progressWrap.appendChild(this.progressFill);
    this.progressText = this.el('span', 'progress-text');
    const who = this.el('span', 'annotator-name');
    who.textContent = this.annotator;
    header.append(progressWrap, this.progressText, who);

    this.banner = this.el('div', 'banner hidden');
    const bannerText = this.el('span', 'banner-text');
    bannerText.textContent = 'Could not reach the annotation service.';
    this.bannerRetry = this.el('button', 'banner-retry') as HTMLButtonElement;
    this.bannerRetry.textContent = 'Retry';
    this.bannerRetry.addEventListener('click', () => void this.retryLoad());
    this.banner.append(bannerText, this.bannerRetry);

    this.grid = this.el('div', 'grid');
    this.doneScreen = this.el('div', 'done-screen hidden');

    this.toast = this.el('div', 'toast hidden');
    this.toastMessage = this.el('span', 'toast-msg');
    this.toastRetry = this.el('button', 'toast-retry hidden') as HTMLButtonElement;
    this.toastRetry.textContent = 'Retry';
    this.toastRetry.addEventListener('click', () => void this.confirm());
    this.toast.append(this.toastMessage, this.toastRetry);

    this.root.append(header, this.banner, this.grid, this.doneScreen, this.toast);

    this.doc.addEventListener('keydown', this.onKeyDown);
    this.grid.addEventListener('wheel', this.onWheel, { passive: false });
    this.grid.addEventListener('mousedown', this.onMouseDown);
    this.doc.addEventListener('mousemove', this.onMouseMove);
    this.doc.addEventListener('mouseup', this.onMouseUp);
  }

  get state(): UiState {
    return this.flow.state;
  }

  get currentView(): TaskView | null {
    return this.view;
  }

  start(): Promise<void> {
    return this.track(async () => {
      await this.refreshProgress();
      await this.loadNext();
    });
  }

  /** Resolves once no load/submit is in flight; test hook. */
  whenIdle(): Promise<void> {
    if (this.pendingOps === 0) {
      return Promise.resolve();
    }
    return new Promise((resolve) => this.idleWaiters.push(resolve));
  }

  /** Detach document-level listeners (several apps may share one document). */
  dispose(): void {
    this.doc.removeEventListener('keydown', this.onKeyDown);
    this.doc.removeEventListener('mousemove', this.onMouseMove);
    this.doc.removeEventListener('mouseup', this.onMouseUp);
  }

  highlight(index: number): void {
    if (this.flow.state !== 'reviewing' || this.view === null) {
      return;
    }
    if (index < 0 || index >= this.view.task.candidates.length) {
      return;
    }
    this.view.highlighted = index;
    this.paintHighlight();
  }

  clearHighlight(): void {
    if (this.view !== null) {
      this.view.highlighted = null;
      this.paintHighlight();
    }
  }

  /** Explicit confirm is the only path that posts a selection. */
  confirm(): Promise<void> {
    if (this.flow.state !== 'reviewing' || this.view === null || this.view.highlighted === null) {
      return Promise.resolve();
    }
    const view = this.view;
    const candidate = view.task.candidates[view.highlighted!];
    if (candidate === undefined) {
      return Promise.resolve();
    }
    this.flow.transition('confirm');
    this.hideToast();
    return this.track(async () => {
      try {
        await this.api.submit({
          pair_id: view.task.pair_id,
          candidate_id: candidate.candidate_id,
          annotator: this.annotator,
        });
      } catch (err) {
        if (err instanceof ApiError && err.staleLease) {
          this.flow.transition('submitStale');
          this.showToast('This task was handed to someone else; loading a fresh one.', false);
          await this.loadNext();
          return;
        }
        this.flow.transition('submitFailed');
        this.showToast(this.describe(err), true);
        return;
      }
      this.flow.transition('submitOk');
      await this.refreshProgress();
      await this.loadNext();
    });
  }

  resetZoom(): void {
    if (this.view !== null) {
      this.view.view = { ...IDENTITY };
      this.paintTransform();
    }
  }

  applyZoom(cursorX: number, cursorY: number, factor: number): void {
    if (this.view !== null) {
      this.view.view = zoomAt(this.view.view, cursorX, cursorY, factor);
      this.paintTransform();
    }
  }

  applyPan(dx: number, dy: number): void {
    if (this.view !== null) {
      this.view.view = pan(this.view.view, dx, dy);
      this.paintTransform();
    }
  }

  get transform(): ViewTransform | null {
    return this.view?.view ?? null;
  }

  // -- flow steps -------------------------------------------------------------

  private async loadNext(): Promise<void> {
    this.view = null;
    this.grid.innerHTML = '';
    this.banner.classList.add('hidden');
    this.doneScreen.classList.add('hidden');
    let task;
    try {
      task = await this.api.nextTask(this.annotator);
    } catch (err) {
      this.flow.transition('loadFailed');
      this.banner.classList.remove('hidden');
      const text = this.banner.querySelector('.banner-text') as HTMLElement;
      text.textContent = this.describe(err);
      return;
    }
    if (task === null) {
      this.flow.transition('queueEmpty');
      this.renderDone();
      return;
    }
    this.view = toTaskView(task);
    this.flow.transition('taskLoaded');
    this.renderTask();
  }

  private retryLoad(): Promise<void> {
    if (this.flow.state !== 'error') {
      return Promise.resolve();
    }
    this.flow.transition('retry');
    return this.track(() => this.loadNext());
  }

  recheckQueue(): Promise<void> {
    if (this.flow.state !== 'done') {
      return Promise.resolve();
    }
    this.flow.transition('recheck');
    return this.track(() => this.loadNext());
  }

  private async refreshProgress(): Promise<void> {
    try {
      const p = await this.api.progress();
      const total = p.pending + p.done;
      const pct = total === 0 ? 0 : Math.round((100 * p.done) / total);
      this.progressFill.style.width = `${pct}%`;
      this.progressText.textContent = `${p.done} / ${total} annotated`;
    } catch {
      // progress is advisory; a failed poll never blocks the review flow
    }
  }

  // -- rendering ----------------------------------------------------------------

  private renderTask(): void {
    const view = this.view!;
    this.grid.innerHTML = '';
    this.grid.appendChild(this.tile(view.task.lq_thumbnail_ref, 'input (LQ)', null));
    view.task.candidates.forEach((candidate, i) => {
      const label = `${candidate.effective_token_length} tokens`;
      const tile = this.tile(candidate.restored_image_ref, label, i);
      const preview = this.el('div', 'tile-preview');
      preview.textContent = candidate.caption_preview;
      tile.appendChild(preview);
      tile.addEventListener('click', () => this.highlight(i));
      this.grid.appendChild(tile);
    });
    this.paintTransform();
    this.paintHighlight();
  }

  private tile(imageRef: string, label: string, index: number | null): HTMLElement {
    const tile = this.el('div', index === null ? 'tile tile-lq' : 'tile tile-candidate');
    if (index !== null) {
      tile.dataset.index = String(index);
      const badge = this.el('span', 'tile-badge');
      badge.textContent = String(index + 1);
      tile.appendChild(badge);
    }
    const meta = this.el('div', 'tile-meta');
    meta.textContent = label;
    const viewport = this.el('div', 'tile-viewport');
    const img = this.doc.createElement('img');
    img.className = 'tile-img';
    img.src = this.api.imageUrl(imageRef);
    img.draggable = false;
    viewport.appendChild(img);
    tile.append(meta, viewport);
    return tile;
  }

  private renderDone(): void {
    this.doneScreen.innerHTML = '';
    const headline = this.el('h2', 'done-headline');
    headline.textContent = 'All done';
    const note = this.el('p', 'done-note');
    note.textContent = 'Every pending pair has been annotated.';
    const again = this.el('button', 'done-recheck') as HTMLButtonElement;
    again.textContent = 'Check again';
    again.addEventListener('click', () => void this.recheckQueue());
    this.doneScreen.append(headline, note, again);
    this.doneScreen.classList.remove('hidden');
    void this.refreshProgress();
  }

  private paintHighlight(): void {
    const highlighted = this.view?.highlighted ?? null;
    this.grid.querySelectorAll<HTMLElement>('.tile-candidate').forEach((tile) => {
      tile.classList.toggle('highlighted', Number(tile.dataset.index) === highlighted);
    });
  }

  private paintTransform(): void {
    const t = this.view?.view ?? IDENTITY;
    const css = cssTransform(t);
    this.grid.querySelectorAll<HTMLElement>('.tile-img').forEach((img) => {
      img.style.transform = css;
    });
  }

  private showToast(message: string, retryable: boolean): void {
    this.toastMessage.textContent = message;
    this.toast.classList.remove('hidden');
    this.toastRetry.classList.toggle('hidden', !retryable);
  }

  private hideToast(): void {
    this.toast.classList.add('hidden');
  }

  private describe(err: unknown): string {
    if (err instanceof ApiError) {
      return `Submit rejected (${err.kind}): ${err.message}`;
    }
    if (err instanceof TransportError) {
      return 'Network problem; your selection was kept. Retry when back online.';
    }
    return String(err);
  }

  // -- input --------------------------------------------------------------------

  private onKeyDown = (event: KeyboardEvent): void => {
    if (event.key >= '1' && event.key <= '9') {
      this.highlight(Number(event.key) - 1);
    } else if (event.key === 'Enter') {
      void this.confirm();
    } else if (event.key === 'Escape') {
      this.clearHighlight();
    } else if (event.key === 'z') {
      this.resetZoom();
    }
  };

  private onWheel = (event: WheelEvent): void => {
    event.preventDefault();
    const viewport = (event.target as HTMLElement).closest('.tile-viewport');
    if (viewport === null) {
      return;
    }
    const rect = viewport.getBoundingClientRect();
    const factor = event.deltaY < 0 ? WHEEL_STEP : 1 / WHEEL_STEP;
    this.applyZoom(event.clientX - rect.left, event.clientY - rect.top, factor);
  };

  private onMouseDown = (event: MouseEvent): void => {
    if ((event.target as HTMLElement).closest('.tile-viewport') !== null) {
      this.dragging = true;
      this.dragX = event.clientX;
      this.dragY = event.clientY;
      event.preventDefault();
    }
  };

  private onMouseMove = (event: MouseEvent): void => {
    if (this.dragging) {
      this.applyPan(event.clientX - this.dragX, event.clientY - this.dragY);
      this.dragX = event.clientX;
      this.dragY = event.clientY;
    }
  };

  private onMouseUp = (): void => {
    this.dragging = false;
  };

  // -- plumbing ------------------------------------------------------------------

  private el(tag: string, classes: string): HTMLElement {
    const node = this.doc.createElement(tag);
    node.className = classes;
    return node;
  }

  private track(op: () => Promise<void>): Promise<void> {
    this.pendingOps += 1;
    return op().finally(() => {
      this.pendingOps -= 1;
      if (this.pendingOps === 0) {
        this.idleWaiters.splice(0).forEach((resolve) => resolve());
      }
    });
  }
}

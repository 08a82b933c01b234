// Entry point: resolve the API base from /api/config, pick an annotator
// name, and boot the app into #app.

import { ApiClient } from './api.js';
import { AnnotationApp } from './app.js';

function annotatorName(): string {
  const fromUrl = new URLSearchParams(window.location.search).get('annotator');
  if (fromUrl !== null && fromUrl !== '') {
    window.localStorage.setItem('annotator', fromUrl);
    return fromUrl;
  }
  const stored = window.localStorage.getItem('annotator');
  if (stored !== null && stored !== '') {
    return stored;
  }
  const generated = `anon-${Math.random().toString(36).slice(2, 8)}`;
  window.localStorage.setItem('annotator', generated);
  return generated;
}

export async function boot(root: HTMLElement): Promise<AnnotationApp> {
  const bootstrap = new ApiClient('');
  const config = await bootstrap.config();
  const api = new ApiClient(config.api_base);
  const app = new AnnotationApp(root, api, annotatorName());
  await app.start();
  return app;
}

const root = document.getElementById('app');
if (root !== null) {
  void boot(root);
}

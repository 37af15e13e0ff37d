/**
 * Plane geometry for the scatter view: the data-to-screen transform with
 * pan/zoom, and point-in-polygon tests for lasso selection. Pure math,
 * no DOM, so every piece is unit-testable headless.
 */

export interface Pt {
	x: number;
	y: number;
}

export interface Bounds {
	minX: number;
	minY: number;
	maxX: number;
	maxY: number;
}

/** Axis-aligned bounds of a point set; zero-size bounds for an empty set. */
export function boundsOf(points: readonly Pt[]): Bounds {
	if (points.length === 0) return { minX: 0, minY: 0, maxX: 0, maxY: 0 };
	let minX = Infinity;
	let minY = Infinity;
	let maxX = -Infinity;
	let maxY = -Infinity;
	for (const p of points) {
		if (p.x < minX) minX = p.x;
		if (p.x > maxX) maxX = p.x;
		if (p.y < minY) minY = p.y;
		if (p.y > maxY) maxY = p.y;
	}
	return { minX, minY, maxX, maxY };
}

/**
 * Ray-casting point-in-polygon test. Points exactly on an edge may land
 * on either side; the lasso treats that as acceptable imprecision.
 */
export function pointInPolygon(p: Pt, polygon: readonly Pt[]): boolean {
	let inside = false;
	const n = polygon.length;
	for (let i = 0, j = n - 1; i < n; j = i++) {
		const a = polygon[i];
		const b = polygon[j];
		const crosses = a.y > p.y !== b.y > p.y;
		if (crosses && p.x < ((b.x - a.x) * (p.y - a.y)) / (b.y - a.y) + a.x) {
			inside = !inside;
		}
	}
	return inside;
}

/**
 * Data-to-screen mapping: uniform scale (same for x and y, so projection
 * distances stay isotropic), y flipped to screen orientation, plus a pan
 * offset in screen pixels.
 */
export class ViewTransform {
	/** Pixels per data unit. */
	scale = 1;
	/** Screen position of the data origin. */
	offsetX = 0;
	offsetY = 0;

	/** Fit the given data bounds into a width x height viewport with padding. */
	fit(bounds: Bounds, width: number, height: number, pad = 20): void {
		const spanX = Math.max(bounds.maxX - bounds.minX, 1e-12);
		const spanY = Math.max(bounds.maxY - bounds.minY, 1e-12);
		const usableW = Math.max(width - 2 * pad, 1);
		const usableH = Math.max(height - 2 * pad, 1);
		this.scale = Math.min(usableW / spanX, usableH / spanY);
		const cx = (bounds.minX + bounds.maxX) / 2;
		const cy = (bounds.minY + bounds.maxY) / 2;
		this.offsetX = width / 2 - cx * this.scale;
		this.offsetY = height / 2 + cy * this.scale;
	}

	toScreen(p: Pt): Pt {
		return {
			x: p.x * this.scale + this.offsetX,
			y: -p.y * this.scale + this.offsetY,
		};
	}

	toData(p: Pt): Pt {
		return {
			x: (p.x - this.offsetX) / this.scale,
			y: -(p.y - this.offsetY) / this.scale,
		};
	}

	/** Pan by a screen-space delta. */
	panBy(dx: number, dy: number): void {
		this.offsetX += dx;
		this.offsetY += dy;
	}

	/** Zoom by a factor, keeping the data point under `anchor` fixed. */
	zoomAt(anchor: Pt, factor: number): void {
		this.offsetX = anchor.x - (anchor.x - this.offsetX) * factor;
		this.offsetY = anchor.y - (anchor.y - this.offsetY) * factor;
		this.scale *= factor;
	}
}
